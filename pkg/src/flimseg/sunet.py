"""Dual-encoder U-shaped segmentation network.

Two three-layer encoders (one per MRI modality) feed a shared decoder.
Skip connections concatenate both modalities' pre-pool feature blocks with
the decoder block of the matching scale after each transposed convolution;
a final 1^3 convolution emits four class channels (background, ED, ET, NC).

Training regimes:
  fbp  -- plain encoders (conv + bias), everything trained from random init
  pbp  -- marker-estimated encoders frozen, only the decoder trains
  ft   -- marker-estimated encoders fine-tuned along with the decoder
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoder import EncoderModel
from .volume import LabelVolume, Volume

ENCODER_LAYERS = 3
N_CLASSES = 4
REGIMES = ("fbp", "pbp", "ft")
MODALITY_ORDER = ("FLAIR", "T1Gd")


@dataclass(frozen=True)
class SunetConfig:
    encoder_widths: tuple[int, int, int] = (16, 32, 64)
    kernel: int = 3
    classes: int = N_CLASSES

    def __post_init__(self):
        if len(self.encoder_widths) != ENCODER_LAYERS:
            raise ValueError(f"expected {ENCODER_LAYERS} encoder widths")
        if self.classes != N_CLASSES:
            raise ValueError("the network emits exactly four class channels")

    @property
    def decoder_widths(self) -> tuple[int, int, int]:
        return tuple(reversed(self.encoder_widths))

    def to_dict(self) -> dict:
        return {
            "encoder_widths": list(self.encoder_widths),
            "kernel": self.kernel,
            "classes": self.classes,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SunetConfig":
        return cls(
            encoder_widths=tuple(doc["encoder_widths"]),
            kernel=doc["kernel"],
            classes=doc["classes"],
        )


@dataclass
class TrainConfig:
    lr0: float = 2.5e-3
    epochs: int = 100
    batch_size: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0 or self.epochs < 1:
            raise ValueError("lr0 must be positive and epochs >= 1")
        if self.batch_size != 1:
            raise ValueError("training uses batch size 1")

    def lr_at(self, epoch: int) -> float:
        """Linear decay from lr0 toward 0 after the final epoch (0-based)."""
        return self.lr0 * (1.0 - epoch / self.epochs)


class SunetModel:
    """Named parameter tensors plus architecture configuration.

    mode 'flim': encoders carry constant per-layer centralization statistics
    and bias-free filter banks. mode 'plain': conv + bias encoders.
    The frozen set lists tensors excluded from optimizer updates.
    """

    def __init__(self, config: SunetConfig, mode: str, params: dict[str, np.ndarray],
                 frozen: frozenset[str] = frozenset()):
        if mode not in ("flim", "plain"):
            raise ValueError(f"unknown encoder mode {mode!r}")
        self.config = config
        self.mode = mode
        self.params = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in params.items()}
        self.frozen = frozenset(frozen)

    def trainable_names(self) -> list[str]:
        frozen = self.frozen | self._constant_names()
        return sorted(name for name in self.params if name not in frozen)

    def _constant_names(self) -> set[str]:
        return {n for n in self.params if n.endswith(".mean") or n.endswith(".std")}

    def copy(self) -> "SunetModel":
        return SunetModel(
            config=self.config,
            mode=self.mode,
            params={k: v.copy() for k, v in self.params.items()},
            frozen=self.frozen,
        )


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _decoder_params(config: SunetConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    w1, w2, w3 = config.encoder_widths
    d1, d2, d3 = config.decoder_widths
    k3 = config.kernel ** 3
    params: dict[str, np.ndarray] = {}
    stage_io = [
        ("1", 2 * w3, d1, d1 + 2 * w3),
        ("2", d1, d2, d2 + 2 * w2),
        ("3", d2, d3, d3 + 2 * w1),
    ]
    for tag, up_in, width, cat_in in stage_io:
        params[f"dec.up{tag}.w"] = _uniform_fan_in(rng, (up_in, width, 2, 2, 2), up_in)
        params[f"dec.up{tag}.b"] = np.zeros(width, dtype=np.float32)
        params[f"dec.conv{tag}.w"] = _uniform_fan_in(rng, (width, cat_in * k3), cat_in * k3)
        params[f"dec.conv{tag}.b"] = np.zeros(width, dtype=np.float32)
    params["head.w"] = _uniform_fan_in(rng, (config.classes, d3), d3)
    params["head.b"] = np.zeros(config.classes, dtype=np.float32)
    return params


def init_plain_model(config: SunetConfig = SunetConfig(), seed: int = 0) -> SunetModel:
    """Random full-backpropagation model: conv+bias encoders, no marker stats."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    k3 = config.kernel ** 3
    params: dict[str, np.ndarray] = {}
    for modality in MODALITY_ORDER:
        c_in = 1
        for layer, width in enumerate(config.encoder_widths, start=1):
            fan_in = c_in * k3
            params[f"enc.{modality}.l{layer}.w"] = _uniform_fan_in(rng, (width, fan_in), fan_in)
            params[f"enc.{modality}.l{layer}.b"] = np.zeros(width, dtype=np.float32)
            c_in = width
    params.update(_decoder_params(config, rng))
    return SunetModel(config=config, mode="plain", params=params)


def init_flim_model(encoders: dict[str, EncoderModel], seed: int = 0,
                    kernel: int = 3) -> SunetModel:
    """Model whose encoders come from estimated filter banks.

    Bank filters become the (frozen or fine-tunable) convolution weights;
    each layer's marker statistics become constant centralization tensors.
    """
    missing = [m for m in MODALITY_ORDER if m not in encoders]
    if missing:
        raise ValueError(f"encoders missing for modalities: {missing}")
    widths = None
    for modality in MODALITY_ORDER:
        model = encoders[modality]
        if len(model.banks) != ENCODER_LAYERS:
            raise ValueError(f"{modality} encoder must have {ENCODER_LAYERS} layers")
        bank_widths = tuple(len(b) for b in model.banks)
        if widths is None:
            widths = bank_widths
        elif widths != bank_widths:
            raise ValueError(
                f"encoder widths differ across modalities: {widths} vs {bank_widths}"
            )
    config = SunetConfig(encoder_widths=widths, kernel=kernel)

    params: dict[str, np.ndarray] = {}
    frozen_constants = []
    for modality in MODALITY_ORDER:
        for layer, bank in enumerate(encoders[modality].banks, start=1):
            if bank.kernel != kernel:
                raise ValueError("bank kernel does not match network kernel")
            prefix = f"enc.{modality}.l{layer}"
            params[f"{prefix}.w"] = bank.weight_matrix
            params[f"{prefix}.mean"] = bank.norm.mean
            params[f"{prefix}.std"] = bank.norm.std
            frozen_constants += [f"{prefix}.mean", f"{prefix}.std"]
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    params.update(_decoder_params(config, rng))
    return SunetModel(config=config, mode="flim", params=params)


def _check_inputs(flair: Volume, t1gd: Volume) -> None:
    if flair.channels != 1 or t1gd.channels != 1:
        raise ValueError("both inputs must be single-channel volumes")
    if flair.spatial_shape != t1gd.spatial_shape:
        raise ValueError("modalities must share a spatial shape")
    if any(e % 2 ** ENCODER_LAYERS for e in flair.spatial_shape):
        raise ValueError(
            f"extents {flair.spatial_shape} must be divisible by {2 ** ENCODER_LAYERS}"
        )


def _wrap_params(model: SunetModel, trainable: set[str]) -> dict[str, ad.Tensor]:
    return {
        name: ad.Tensor(arr, requires_grad=name in trainable)
        for name, arr in model.params.items()
        if not (name.endswith(".mean") or name.endswith(".std"))
    }


def _encoder_graph(model: SunetModel, wrap, modality: str, x: ad.Tensor):
    """Three conv layers; returns (pooled bottleneck, pre-pool blocks)."""
    skips = []
    for layer in range(1, ENCODER_LAYERS + 1):
        prefix = f"enc.{modality}.l{layer}"
        if model.mode == "flim":
            x = ad.centralize(x, model.params[f"{prefix}.mean"], model.params[f"{prefix}.std"])
            x = ad.conv3d(x, wrap[f"{prefix}.w"], model.config.kernel)
        else:
            x = ad.conv3d(x, wrap[f"{prefix}.w"], model.config.kernel)
            x = ad.bias_add(x, wrap[f"{prefix}.b"])
        x = ad.relu(x)
        skips.append(x)
        x = ad.maxpool2(x)
    return x, skips


def _decoder_graph(model: SunetModel, wrap, bottom: ad.Tensor,
                   skips_flair, skips_t1gd) -> ad.Tensor:
    x = bottom
    for stage, scale in zip(("1", "2", "3"), (2, 1, 0)):
        x = ad.conv_transpose2(x, wrap[f"dec.up{stage}.w"])
        x = ad.bias_add(x, wrap[f"dec.up{stage}.b"])
        x = ad.concat([x, skips_flair[scale], skips_t1gd[scale]])
        x = ad.conv3d(x, wrap[f"dec.conv{stage}.w"], model.config.kernel)
        x = ad.bias_add(x, wrap[f"dec.conv{stage}.b"])
        x = ad.relu(x)
    x = ad.conv3d(x, wrap["head.w"], 1)
    return ad.bias_add(x, wrap["head.b"])


def build_graph(model: SunetModel, flair_cl: np.ndarray, t1gd_cl: np.ndarray,
                trainable: set[str] = frozenset()):
    """Full forward graph on channels-last (Z, Y, X, 1) inputs.

    Returns (logits Tensor, wrapped parameter Tensors).
    """
    wrap = _wrap_params(model, set(trainable))
    inputs = {"FLAIR": ad.Tensor(flair_cl), "T1Gd": ad.Tensor(t1gd_cl)}
    bottoms, skips = {}, {}
    for modality in MODALITY_ORDER:
        bottoms[modality], skips[modality] = _encoder_graph(
            model, wrap, modality, inputs[modality]
        )
    bottom = ad.concat([bottoms["FLAIR"], bottoms["T1Gd"]])
    logits = _decoder_graph(model, wrap, bottom, skips["FLAIR"], skips["T1Gd"])
    return logits, wrap


def _to_cl(vol: Volume) -> np.ndarray:
    return np.ascontiguousarray(vol.data.transpose(1, 2, 3, 0))


def forward(model: SunetModel, flair: Volume, t1gd: Volume) -> Volume:
    """Logits volume (4, Z, Y, X) for a pair of modality volumes."""
    _check_inputs(flair, t1gd)
    logits, _ = build_graph(model, _to_cl(flair), _to_cl(t1gd))
    return Volume(
        data=np.ascontiguousarray(logits.data.transpose(3, 0, 1, 2)),
        spacing_mm=flair.spacing_mm,
    )


def predict_labels(model: SunetModel, flair: Volume, t1gd: Volume) -> LabelVolume:
    """Per-voxel argmax over the four channels; ties go to the lowest class."""
    _check_inputs(flair, t1gd)
    logits, _ = build_graph(model, _to_cl(flair), _to_cl(t1gd))
    return LabelVolume(
        data=np.argmax(logits.data, axis=-1).astype(np.uint8),
        spacing_mm=flair.spacing_mm,
    )


def softmax_cl(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def segmentation_loss(logits: np.ndarray, labels: np.ndarray):
    """Average of voxel-mean cross-entropy and (1 - mean soft Dice).

    logits: channels-last (Z, Y, X, 4); labels: (Z, Y, X) ints in {0..3}.
    Soft Dice runs over the three foreground classes with smoothing 1e-5.
    Returns (loss, gradient w.r.t. logits).
    """
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"label shape {labels.shape} != logits {logits.shape[:-1]}")
    if labels.min() < 0 or labels.max() >= logits.shape[-1]:
        raise ValueError("labels fall outside the class range {0..3}")
    smooth = 1e-5
    n_vox = labels.size
    p = softmax_cl(logits)
    flat_p = p.reshape(n_vox, -1)
    flat_g = labels.reshape(-1)

    picked = np.maximum(flat_p[np.arange(n_vox), flat_g], 1e-30)
    ce = float(-np.log(picked).sum(dtype=np.float64) / n_vox)
    grad_ce = flat_p.copy()
    grad_ce[np.arange(n_vox), flat_g] -= 1.0
    grad_ce /= n_vox

    onehot = np.zeros_like(flat_p)
    onehot[np.arange(n_vox), flat_g] = 1.0
    grad_p = np.zeros_like(flat_p)
    dice_terms = []
    n_fg = logits.shape[-1] - 1
    for c in range(1, logits.shape[-1]):
        pc, gc = flat_p[:, c], onehot[:, c]
        overlap = float((pc * gc).sum(dtype=np.float64))
        denom = float(pc.sum(dtype=np.float64) + gc.sum(dtype=np.float64) + smooth)
        dice_c = (2.0 * overlap + smooth) / denom
        dice_terms.append(dice_c)
        # d(1 - meanDice)/dp_c = -(2*g - dice_c) / (denom * n_fg)
        grad_p[:, c] = -(2.0 * gc - dice_c) / (denom * n_fg)
    dice = float(np.mean(dice_terms))
    # chain rule through softmax: dL/dz_j = p_j * (dL/dp_j - sum_c dL/dp_c * p_c)
    inner = (grad_p * flat_p).sum(axis=1, keepdims=True)
    grad_dice = flat_p * (grad_p - inner)

    loss = 0.5 * ce + 0.5 * (1.0 - dice)
    grad = (0.5 * grad_ce + 0.5 * grad_dice).reshape(logits.shape).astype(logits.dtype)
    return loss, grad


def encode_case(model: SunetModel, flair: Volume, t1gd: Volume) -> dict:
    """Precompute the frozen-encoder features a decoder-only pass consumes."""
    _check_inputs(flair, t1gd)
    wrap = _wrap_params(model, set())
    inputs = {"FLAIR": _to_cl(flair), "T1Gd": _to_cl(t1gd)}
    bottoms, skips = {}, {}
    for modality in MODALITY_ORDER:
        bottom, pre = _encoder_graph(model, wrap, modality, ad.Tensor(inputs[modality]))
        bottoms[modality] = bottom.data
        skips[modality] = [t.data for t in pre]
    return {
        "bottom": np.concatenate([bottoms["FLAIR"], bottoms["T1Gd"]], axis=-1),
        "skips_FLAIR": skips["FLAIR"],
        "skips_T1Gd": skips["T1Gd"],
    }


def build_decoder_graph(model: SunetModel, cache: dict, trainable: set[str]):
    """Decoder-only graph over cached encoder features (pbp fast path)."""
    wrap = _wrap_params(model, set(trainable))
    logits = _decoder_graph(
        model,
        wrap,
        ad.Tensor(cache["bottom"]),
        [ad.Tensor(a) for a in cache["skips_FLAIR"]],
        [ad.Tensor(a) for a in cache["skips_T1Gd"]],
    )
    return logits, wrap


def _resolve_regime(model: SunetModel, regime: str) -> set[str]:
    """Trainable tensor names for a regime; validates regime/init pairing."""
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}, got {regime!r}")
    if regime == "fbp" and model.mode != "plain":
        raise ValueError("fbp trains a randomly initialized model, not a marker-estimated one")
    if regime in ("pbp", "ft") and model.mode != "flim":
        raise ValueError(f"{regime} requires a marker-estimated encoder (filter banks)")
    trainable = set(model.trainable_names())
    if regime == "pbp":
        trainable = {n for n in trainable if not n.startswith("enc.")}
    return trainable


def train(model: SunetModel, cases, tc: TrainConfig, regime: str,
          progress=None):
    """Train under a regime; returns (trained model, per-epoch loss curve).

    Deterministic for a given seed, including the per-epoch case order.
    pbp freezes both encoders, so their features are computed once per case
    and the per-iteration graph covers only the decoder.
    """
    cases = list(cases)
    if not cases:
        raise ValueError("training dataset is empty")
    trainable = _resolve_regime(model, regime)
    trained = model.copy()
    if regime == "pbp":
        trained.frozen = trained.frozen | {
            n for n in trained.params if n.startswith("enc.")
        }

    inputs = [( _to_cl(case.flair), _to_cl(case.t1gd), case.labels.data) for case in cases]
    caches = None
    if regime == "pbp":
        caches = [encode_case(trained, case.flair, case.t1gd) for case in cases]

    adam_m = {n: np.zeros_like(trained.params[n]) for n in trainable}
    adam_v = {n: np.zeros_like(trained.params[n]) for n in trainable}
    step = 0
    curve = []
    for epoch in range(tc.epochs):
        lr = tc.lr_at(epoch)
        rng = np.random.default_rng(np.random.SeedSequence(tc.seed, spawn_key=(epoch,)))
        order = rng.permutation(len(cases))
        losses = []
        for ci in order:
            if caches is not None:
                logits, wrap = build_decoder_graph(trained, caches[ci], trainable)
            else:
                flair_cl, t1gd_cl, _ = inputs[ci]
                logits, wrap = build_graph(trained, flair_cl, t1gd_cl, trainable)
            loss, grad = segmentation_loss(logits.data, inputs[ci][2])
            ad.backward(logits, grad)
            losses.append(loss)
            step += 1
            bias1 = 1.0 - tc.beta1 ** step
            bias2 = 1.0 - tc.beta2 ** step
            for name in trainable:
                g = wrap[name].grad
                if g is None:
                    continue
                m, v = adam_m[name], adam_v[name]
                m *= tc.beta1
                m += (1.0 - tc.beta1) * g
                v *= tc.beta2
                v += (1.0 - tc.beta2) * np.square(g)
                update = (m / bias1) / (np.sqrt(v / bias2) + tc.eps)
                trained.params[name] -= np.float32(lr) * update
        curve.append({"epoch": epoch, "mean_loss": float(np.mean(losses)), "lr": lr})
        if progress is not None:
            progress(curve[-1])
    return trained, curve


def save_checkpoint(model: SunetModel, path) -> None:
    """Checkpoint: JSON manifest line (name -> shape, offset) + f32le blob."""
    names = sorted(model.params)
    tensors = []
    offset = 0
    for name in names:
        shape = list(model.params[name].shape)
        tensors.append({"name": name, "shape": shape, "offset": offset})
        offset += int(np.prod(shape))
    header = {
        "format": "SUNET1",
        "mode": model.mode,
        "config": model.config.to_dict(),
        "frozen": sorted(model.frozen),
        "tensors": tensors,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for name in names:
            fh.write(model.params[name].astype("<f4", copy=False).tobytes(order="C"))


def load_checkpoint(path) -> SunetModel:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != "SUNET1":
            raise ValueError(f"{path}: not a network checkpoint")
        payload = fh.read()
    blob = np.frombuffer(payload, dtype="<f4")
    params = {}
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"]))
        params[entry["name"]] = blob[entry["offset"] : entry["offset"] + size].reshape(
            entry["shape"]
        )
    return SunetModel(
        config=SunetConfig.from_dict(header["config"]),
        mode=header["mode"],
        params=params,
        frozen=frozenset(header["frozen"]),
    )
