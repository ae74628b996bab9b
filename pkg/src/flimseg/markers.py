"""User-drawn scribbles (markers) and their projection through pooling strides."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .volume import Volume

MARKER_LABELS = ("ED", "ET", "NC", "OTHER")
MODALITIES = ("FLAIR", "T1Gd")


@dataclass(frozen=True)
class Marker:
    """One scribble: a labeled, duplicate-free set of (z, y, x) voxels."""

    id: int
    label: str
    voxels: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        if self.id < 1:
            raise ValueError(f"marker id must be positive, got {self.id}")
        if self.label not in MARKER_LABELS:
            raise ValueError(f"marker label must be one of {MARKER_LABELS}, got {self.label!r}")
        vox = tuple(tuple(int(c) for c in v) for v in self.voxels)
        if not vox:
            raise ValueError(f"marker {self.id} has no voxels")
        if any(len(v) != 3 or min(v) < 0 for v in vox):
            raise ValueError(f"marker {self.id} has malformed or negative coordinates")
        if len(set(vox)) != len(vox):
            raise ValueError(f"marker {self.id} repeats a voxel")
        object.__setattr__(self, "voxels", vox)

    def __len__(self) -> int:
        return len(self.voxels)


@dataclass(frozen=True)
class MarkerSet:
    """All markers drawn on one image of one modality."""

    image_id: str
    modality: str
    markers: tuple[Marker, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        markers = tuple(self.markers)
        ids = [m.id for m in markers]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate marker ids in set for image {self.image_id!r}")
        object.__setattr__(self, "markers", markers)

    def total_voxels(self) -> int:
        return sum(len(m) for m in self.markers)

    def bind_check(self, vol: Volume) -> None:
        """Verify every marker voxel lies inside the volume's extent."""
        zmax, ymax, xmax = vol.spatial_shape
        for m in self.markers:
            for z, y, x in m.voxels:
                if z >= zmax or y >= ymax or x >= xmax:
                    raise ValueError(
                        f"marker {m.id} voxel ({z},{y},{x}) outside extent "
                        f"({zmax},{ymax},{xmax}) of image {self.image_id!r}"
                    )


def save_markers(ms: MarkerSet, path) -> None:
    doc = {
        "image_id": ms.image_id,
        "modality": ms.modality,
        "markers": [
            {"id": m.id, "label": m.label, "voxels": [list(v) for v in m.voxels]}
            for m in ms.markers
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def load_markers(path) -> MarkerSet:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    markers = tuple(
        Marker(id=m["id"], label=m["label"], voxels=tuple(tuple(v) for v in m["voxels"]))
        for m in doc["markers"]
    )
    return MarkerSet(image_id=doc["image_id"], modality=doc["modality"], markers=markers)


def project_markers(ms: MarkerSet, stride: int) -> MarkerSet:
    """Map every voxel through floor division by the pooling stride.

    Duplicates collapse; ids and labels survive. This is the index map of a
    stride-2 pooling chain, so a marker always lands inside the pooled grid.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if stride == 1:
        return ms
    projected = []
    for m in ms.markers:
        seen: dict[tuple[int, int, int], None] = {}
        for z, y, x in m.voxels:
            seen.setdefault((z // stride, y // stride, x // stride))
        projected.append(Marker(id=m.id, label=m.label, voxels=tuple(seen)))
    return MarkerSet(image_id=ms.image_id, modality=ms.modality, markers=tuple(projected))


def check_marker_balance(ms: MarkerSet, warn_ratio: float = 2.0) -> dict:
    """Report the max/min marker-size ratio; flag when markers are unbalanced.

    Markers are meant to be drawn with the same size so each region
    contributes a similar amount of patch data; the flag is a soft warning.
    """
    if not ms.markers:
        raise ValueError("marker set is empty")
    sizes = [len(m) for m in ms.markers]
    ratio = max(sizes) / min(sizes)
    return {
        "sizes": {m.id: len(m) for m in ms.markers},
        "ratio": ratio,
        "warning": ratio > warn_ratio,
    }
