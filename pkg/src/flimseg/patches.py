"""Patch extraction at marker voxels with marker-derived normalization.

Normalization statistics come only from the voxels the user scribbled on,
so each layer's patches are centered on what the markers cover rather than
on whole-volume statistics.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .markers import MarkerSet
from .volume import Volume

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean/std computed over marker voxels (population std)."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.ascontiguousarray(self.mean, dtype=np.float32)
        std = np.ascontiguousarray(self.std, dtype=np.float32)
        if mean.ndim != 1 or mean.shape != std.shape:
            raise ValueError("mean and std must be 1D arrays of equal length")
        std = np.maximum(std, STD_FLOOR)
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "NormStats":
        return cls(mean=np.asarray(doc["mean"]), std=np.asarray(doc["std"]))


class PatchOrigin(NamedTuple):
    image_id: str
    marker_id: int
    voxel: tuple[int, int, int]


@dataclass(frozen=True)
class PatchDataset:
    """Vectorized k^3*C patches centered at marker voxels.

    Row order is deterministic: markers by id, voxels in drawn order.
    Vectorization order within a row is (channel, dz, dy, dx).
    """

    kernel: tuple[int, int, int]
    channels: int
    patches: np.ndarray
    origins: tuple[PatchOrigin, ...]

    def __post_init__(self):
        arr = np.ascontiguousarray(self.patches, dtype=np.float32)
        k = self.kernel[0]
        if arr.ndim != 2 or arr.shape[1] != k ** 3 * self.channels:
            raise ValueError(
                f"patch rows must have length k^3*C = {k ** 3 * self.channels}, "
                f"got shape {arr.shape}"
            )
        if arr.shape[0] != len(self.origins):
            raise ValueError("one origin per patch required")
        arr.setflags(write=False)
        object.__setattr__(self, "patches", arr)

    def __len__(self) -> int:
        return self.patches.shape[0]

    def marker_groups(self) -> dict[tuple[str, int], np.ndarray]:
        """Row indices grouped by (image_id, marker_id), in row order."""
        groups: dict[tuple[str, int], list[int]] = {}
        for row, origin in enumerate(self.origins):
            groups.setdefault((origin.image_id, origin.marker_id), []).append(row)
        return {key: np.asarray(rows) for key, rows in groups.items()}


def _marker_values(vol: Volume, ms: MarkerSet) -> np.ndarray:
    """(C, n) array of channel values at every marker voxel."""
    ms.bind_check(vol)
    coords = [v for m in sorted(ms.markers, key=lambda m: m.id) for v in m.voxels]
    if not coords:
        raise ValueError(f"marker set for image {ms.image_id!r} is empty")
    idx = np.asarray(coords)
    return vol.data[:, idx[:, 0], idx[:, 1], idx[:, 2]]


def marker_stats(vol: Volume, ms: MarkerSet) -> NormStats:
    """Per-channel mean/std over the marker voxels of one image."""
    values = _marker_values(vol, ms)
    return NormStats(mean=values.mean(axis=1), std=values.std(axis=1))


def marker_stats_pooled(images: Sequence[Volume], marker_sets: Sequence[MarkerSet]) -> NormStats:
    """Stats over the union of marker voxels across several images.

    Used when one filter bank serves a whole training set, so that patches
    from different images live in the same normalized space.
    """
    if len(images) != len(marker_sets) or not images:
        raise ValueError("need one marker set per image, and at least one image")
    values = np.concatenate(
        [_marker_values(vol, ms) for vol, ms in zip(images, marker_sets)], axis=1
    )
    return NormStats(mean=values.mean(axis=1), std=values.std(axis=1))


def normalize_volume(vol: Volume, stats: NormStats) -> np.ndarray:
    """(data - mean) / std per channel; returns a writable float32 array."""
    if stats.channels != vol.channels:
        raise ValueError(
            f"stats carry {stats.channels} channels, volume has {vol.channels}"
        )
    return (vol.data - stats.mean[:, None, None, None]) / stats.std[:, None, None, None]


def extract_patches(vol: Volume, ms: MarkerSet, kernel: int, stats: NormStats) -> PatchDataset:
    """One centralized patch per marker voxel.

    Out-of-bounds positions are zero in normalized space, i.e. the marker
    mean in raw space, so border patches keep the fixed row length.
    """
    if kernel % 2 == 0 or kernel < 1:
        raise ValueError(f"kernel must be odd and positive, got {kernel}")
    ms.bind_check(vol)
    normalized = normalize_volume(vol, stats)
    r = kernel // 2
    padded = np.pad(normalized, ((0, 0), (r, r), (r, r), (r, r)))
    rows = []
    origins = []
    for m in sorted(ms.markers, key=lambda m: m.id):
        for z, y, x in m.voxels:
            patch = padded[:, z : z + kernel, y : y + kernel, x : x + kernel]
            rows.append(patch.reshape(-1))
            origins.append(PatchOrigin(ms.image_id, m.id, (z, y, x)))
    return PatchDataset(
        kernel=(kernel, kernel, kernel),
        channels=vol.channels,
        patches=np.stack(rows),
        origins=tuple(origins),
    )


def concat_datasets(datasets: Sequence[PatchDataset]) -> PatchDataset:
    """Merge per-image patch datasets extracted with the same kernel/stats."""
    if not datasets:
        raise ValueError("no patch datasets to merge")
    first = datasets[0]
    for ds in datasets[1:]:
        if ds.kernel != first.kernel or ds.channels != first.channels:
            raise ValueError("patch datasets disagree on kernel or channel count")
    return PatchDataset(
        kernel=first.kernel,
        channels=first.channels,
        patches=np.concatenate([ds.patches for ds in datasets]),
        origins=tuple(o for ds in datasets for o in ds.origins),
    )
