"""Reading phantom datasets from their on-disk layout.

A dataset directory holds one `case_<id>/` directory per case with
flair.mvol, t1gd.mvol, labels.mvol, subregions.mvol, markers_flair.mk and
markers_t1gd.mk, plus a `manifest` JSON file naming the split membership.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .markers import MarkerSet, load_markers
from .phantom import decode_subregions
from .volume import LabelVolume, Volume, read_labels, read_volume

MARKER_FILES = {"FLAIR": "markers_flair.mk", "T1Gd": "markers_t1gd.mk"}
VOLUME_FILES = {"FLAIR": "flair.mvol", "T1Gd": "t1gd.mvol"}


@dataclass(frozen=True)
class SegCase:
    case_id: str
    flair: Volume
    t1gd: Volume
    labels: LabelVolume

    def volume(self, modality: str) -> Volume:
        if modality == "FLAIR":
            return self.flair
        if modality == "T1Gd":
            return self.t1gd
        raise KeyError(f"unknown modality {modality!r}")


class Dataset:
    """Lazy view over a dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest"
        if not manifest_path.exists():
            raise FileNotFoundError(f"{self.root}: no manifest file")
        with open(manifest_path, "r", encoding="utf-8") as fh:
            self.manifest = json.load(fh)

    def case_ids(self, split: str | None = None) -> list[str]:
        if split is None:
            return list(self.manifest["cases"])
        if split == "marked":
            return list(self.manifest["marked"])
        if split not in ("train", "val", "test"):
            raise KeyError(f"unknown split {split!r}")
        return list(self.manifest[split])

    def case_dir(self, case_id: str) -> Path:
        path = self.root / case_id
        if not path.is_dir():
            raise FileNotFoundError(f"case {case_id!r} not found under {self.root}")
        return path

    def load_case(self, case_id: str) -> SegCase:
        d = self.case_dir(case_id)
        return SegCase(
            case_id=case_id,
            flair=read_volume(d / "flair.mvol"),
            t1gd=read_volume(d / "t1gd.mvol"),
            labels=read_labels(d / "labels.mvol"),
        )

    def load_split(self, split: str) -> list[SegCase]:
        return [self.load_case(cid) for cid in self.case_ids(split)]

    def load_volume(self, case_id: str, modality: str) -> Volume:
        if modality not in VOLUME_FILES:
            raise KeyError(f"unknown modality {modality!r}")
        return read_volume(self.case_dir(case_id) / VOLUME_FILES[modality])

    def load_markers(self, case_id: str, modality: str) -> MarkerSet:
        if modality not in MARKER_FILES:
            raise KeyError(f"unknown modality {modality!r}")
        return load_markers(self.case_dir(case_id) / MARKER_FILES[modality])

    def load_regions(self, case_id: str) -> dict[str, np.ndarray]:
        return decode_subregions(read_volume(self.case_dir(case_id) / "subregions.mvol"))

    def marked_inputs(self, modality: str):
        """(volumes, marker sets) for the marked training cases, in order."""
        ids = self.case_ids("marked")
        volumes = [self.load_volume(cid, modality) for cid in ids]
        markers = [self.load_markers(cid, modality) for cid in ids]
        return volumes, markers
