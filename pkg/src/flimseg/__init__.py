"""flimseg: marker-driven encoder construction and a small dual-encoder
U-net for volumetric tumor segmentation.

Filters of the encoder are estimated from patches at user-drawn scribbles
(no backpropagation); an interactive multi-step procedure lets a human or
a scripted oracle select the first-layer filter bank; only the decoder is
then trained, with optional fine-tuning of the encoder.
"""

__version__ = "0.1.0"
