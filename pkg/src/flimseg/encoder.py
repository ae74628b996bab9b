"""Filter estimation from marker patches and layer-wise encoder construction.

A layer's filters are cluster centers (optionally reduced by PCA) of the
centralized patches drawn at marker voxels, normalized to unit length so no
filter dominates. Deeper layers repeat the procedure on the previous
layer's output with markers projected through the pooling stride.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import convops
from .clustering import minibatch_kmeans, pca_components
from .markers import MarkerSet, project_markers
from .patches import (
    NormStats,
    PatchDataset,
    concat_datasets,
    extract_patches,
    marker_stats_pooled,
    normalize_volume,
)
from .volume import Volume

UNIT_NORM_TOL = 1e-6


def unit_normalize(weights: np.ndarray) -> np.ndarray:
    """Scale each row to unit L2 norm; rejects all-zero rows."""
    weights = np.asarray(weights, dtype=np.float64)
    norms = np.linalg.norm(weights, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValueError("cannot normalize an all-zero filter candidate")
    return (weights / norms).astype(np.float32)


@dataclass(frozen=True)
class Filter:
    """One unit-norm convolution filter with its estimation provenance."""

    weights: np.ndarray
    source: dict

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float32)
        norm = float(np.linalg.norm(w.astype(np.float64)))
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise ValueError(f"filter norm {norm} deviates from 1 beyond {UNIT_NORM_TOL}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class FilterBank:
    """All filters of one convolutional layer plus its input normalization."""

    layer_index: int
    kernel: int
    in_channels: int
    filters: tuple[Filter, ...]
    norm: NormStats

    def __post_init__(self):
        if not self.filters:
            raise ValueError("a filter bank needs at least one filter")
        length = self.kernel ** 3 * self.in_channels
        for f in self.filters:
            if f.weights.shape != (length,):
                raise ValueError(
                    f"filter length {f.weights.shape} does not match k^3*C_in={length}"
                )
        if self.norm.channels != self.in_channels:
            raise ValueError("normalization stats channel count mismatch")

    def __len__(self) -> int:
        return len(self.filters)

    @property
    def weight_matrix(self) -> np.ndarray:
        return np.stack([f.weights for f in self.filters])


@dataclass(frozen=True)
class LayerSpec:
    kernel: int = 3
    clusters_per_marker: int = 5
    pca_out: int | None = None
    pool: bool = True

    def __post_init__(self):
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.clusters_per_marker < 1:
            raise ValueError("clusters_per_marker must be >= 1")
        if self.pca_out is not None and self.pca_out < 1:
            raise ValueError("pca_out must be >= 1 when set")


@dataclass(frozen=True)
class EncoderSpec:
    layers: tuple[LayerSpec, ...] = field(
        default_factory=lambda: (
            LayerSpec(pca_out=16),
            LayerSpec(pca_out=32),
            LayerSpec(pca_out=64),
        )
    )

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def to_dict(self) -> dict:
        return {
            "layers": [
                {
                    "kernel": l.kernel,
                    "clusters_per_marker": l.clusters_per_marker,
                    "pca_out": l.pca_out,
                    "pool": l.pool,
                }
                for l in self.layers
            ]
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EncoderSpec":
        return cls(
            layers=tuple(
                LayerSpec(
                    kernel=e.get("kernel", 3),
                    clusters_per_marker=e.get("clusters_per_marker", 5),
                    pca_out=e.get("pca_out"),
                    pool=e.get("pool", True),
                )
                for e in doc["layers"]
            )
        )


@dataclass(frozen=True)
class EncoderModel:
    modality: str
    banks: tuple[FilterBank, ...]
    spec: EncoderSpec

    def __post_init__(self):
        for prev, nxt in zip(self.banks, self.banks[1:]):
            if nxt.in_channels != len(prev):
                raise ValueError(
                    f"layer {nxt.layer_index} expects {nxt.in_channels} input "
                    f"channels but layer {prev.layer_index} emits {len(prev)}"
                )


def estimate_layer_filters(
    pd: PatchDataset,
    stats: NormStats,
    clusters_per_marker: int,
    pca_out: int | None = None,
    seed: int = 0,
    layer_index: int = 1,
) -> FilterBank:
    """Cluster each marker's patches, pool the centers, optionally PCA-reduce.

    Every final filter is normalized to unit length. With pca_out set, the
    candidate centers are replaced by their top principal components.
    """
    if len(pd) == 0:
        raise ValueError("patch dataset is empty")
    groups = pd.marker_groups()
    group_seeds = np.random.SeedSequence(seed).generate_state(len(groups))
    candidates = []
    provenance = []
    for ((image_id, marker_id), rows), gseed in zip(groups.items(), group_seeds):
        result = minibatch_kmeans(pd.patches[rows], clusters_per_marker, seed=int(gseed))
        for ci, center in enumerate(result.centers):
            candidates.append(center)
            provenance.append(
                {"origin": "flim", "image": image_id, "marker": marker_id, "cluster": ci}
            )
    candidates = np.stack(candidates)

    if pca_out is not None:
        if pca_out > candidates.shape[0]:
            raise ValueError(
                f"pca_out={pca_out} exceeds the {candidates.shape[0]} candidate centers"
            )
        pca = pca_components(candidates, pca_out)
        candidates = pca.components
        provenance = [{"origin": "flim-pca", "component": i} for i in range(pca_out)]

    weights = unit_normalize(candidates)
    filters = tuple(Filter(weights=w, source=src) for w, src in zip(weights, provenance))
    return FilterBank(
        layer_index=layer_index,
        kernel=pd.kernel[0],
        in_channels=pd.channels,
        filters=filters,
        norm=stats,
    )


def conv_layer_forward(vol: Volume, bank: FilterBank, pool: bool = True) -> Volume:
    """Centralize, convolve with the bank, ReLU, optionally max-pool."""
    if vol.channels != bank.in_channels:
        raise ValueError(
            f"volume has {vol.channels} channels, bank expects {bank.in_channels}"
        )
    normalized = normalize_volume(vol, bank.norm)
    x = np.ascontiguousarray(normalized.transpose(1, 2, 3, 0))
    out, _ = convops.conv3d(x, bank.weight_matrix, bank.kernel)
    np.maximum(out, 0.0, out=out)
    spacing = vol.spacing_mm
    if pool:
        out, _ = convops.maxpool2(out)
        spacing = tuple(s * 2 for s in spacing)
    return Volume(data=np.ascontiguousarray(out.transpose(3, 0, 1, 2)), spacing_mm=spacing)


def encoder_forward(model: EncoderModel, vol: Volume, keep_prepool: bool = False):
    """Run all encoder layers; optionally collect the pre-pool feature blocks.

    Returns the final Volume, or (final, [pre-pool Volumes]) with
    keep_prepool=True. Pre-pool blocks are what skip connections consume.
    """
    prepool: list[Volume] = []
    current = vol
    for bank, layer in zip(model.banks, model.spec.layers):
        if keep_prepool:
            unpooled = conv_layer_forward(current, bank, pool=False)
            prepool.append(unpooled)
            if layer.pool:
                pooled, _ = convops.maxpool2(
                    np.ascontiguousarray(unpooled.data.transpose(1, 2, 3, 0))
                )
                current = Volume(
                    data=np.ascontiguousarray(pooled.transpose(3, 0, 1, 2)),
                    spacing_mm=tuple(s * 2 for s in unpooled.spacing_mm),
                )
            else:
                current = unpooled
        else:
            current = conv_layer_forward(current, bank, pool=layer.pool)
    if keep_prepool:
        return current, prepool
    return current


def build_encoder(
    images: Sequence[Volume],
    marker_sets: Sequence[MarkerSet],
    spec: EncoderSpec,
    layer1_bank: FilterBank | None = None,
    seed: int = 0,
) -> EncoderModel:
    """Estimate all layers of an encoder from marked training images.

    Layer 1 comes either from `layer1_bank` (the user-selected bank) or from
    a fresh estimation. Each deeper layer re-derives marker statistics and
    patches from the previous layer's output, with markers projected through
    the cumulative pooling stride.
    """
    if len(images) != len(marker_sets) or not images:
        raise ValueError("need one marker set per image, and at least one image")
    modalities = {ms.modality for ms in marker_sets}
    if len(modalities) != 1:
        raise ValueError(f"marker sets mix modalities: {sorted(modalities)}")
    for vol, ms in zip(images, marker_sets):
        ms.bind_check(vol)
    if layer1_bank is not None and layer1_bank.in_channels != images[0].channels:
        raise ValueError("layer-1 bank channel count does not match the images")

    layer_seeds = np.random.SeedSequence(seed).generate_state(spec.n_layers)
    banks: list[FilterBank] = []
    current_images = list(images)
    current_markers = list(marker_sets)
    for idx, layer in enumerate(spec.layers):
        if idx == 0 and layer1_bank is not None:
            bank = layer1_bank
        else:
            stats = marker_stats_pooled(current_images, current_markers)
            pd = concat_datasets(
                [
                    extract_patches(vol, ms, layer.kernel, stats)
                    for vol, ms in zip(current_images, current_markers)
                ]
            )
            bank = estimate_layer_filters(
                pd,
                stats,
                layer.clusters_per_marker,
                pca_out=layer.pca_out,
                seed=int(layer_seeds[idx]),
                layer_index=idx + 1,
            )
        banks.append(bank)
        if idx + 1 < spec.n_layers:
            current_images = [
                conv_layer_forward(vol, bank, pool=layer.pool) for vol in current_images
            ]
            if layer.pool:
                current_markers = [project_markers(ms, 2) for ms in current_markers]
    return EncoderModel(modality=marker_sets[0].modality, banks=tuple(banks), spec=spec)


def save_bank(bank: FilterBank, path) -> None:
    """Bank file: JSON header line + raw little-endian f32 filter rows."""
    header = {
        "format": "FLIMBANK1",
        "layer": bank.layer_index,
        "kernel": bank.kernel,
        "in_channels": bank.in_channels,
        "count": len(bank),
        "norm": bank.norm.to_dict(),
        "provenance": [f.source for f in bank.filters],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        fh.write(bank.weight_matrix.astype("<f4").tobytes(order="C"))


def load_bank(path) -> FilterBank:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != "FLIMBANK1":
            raise ValueError(f"{path}: not a filter bank file")
        count = header["count"]
        length = header["kernel"] ** 3 * header["in_channels"]
        payload = fh.read()
    if len(payload) != 4 * count * length:
        raise ValueError(f"{path}: truncated filter payload")
    weights = np.frombuffer(payload, dtype="<f4").reshape(count, length)
    filters = tuple(
        Filter(weights=w, source=src) for w, src in zip(weights, header["provenance"])
    )
    return FilterBank(
        layer_index=header["layer"],
        kernel=header["kernel"],
        in_channels=header["in_channels"],
        filters=filters,
        norm=NormStats.from_dict(header["norm"]),
    )


def save_encoder(model: EncoderModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {"modality": model.modality, "spec": model.spec.to_dict(), "banks": []}
    for i, bank in enumerate(model.banks, start=1):
        name = f"layer{i}.fb"
        save_bank(bank, directory / name)
        doc["banks"].append(name)
    with open(directory / "encoder.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_encoder(directory) -> EncoderModel:
    directory = Path(directory)
    with open(directory / "encoder.json", "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    banks = tuple(load_bank(directory / name) for name in doc["banks"])
    return EncoderModel(
        modality=doc["modality"], banks=banks, spec=EncoderSpec.from_dict(doc["spec"])
    )
