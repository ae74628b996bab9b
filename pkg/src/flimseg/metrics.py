"""Dice evaluation with the ET / NC / WT region composition scheme."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .volume import LabelVolume

REGION_NAMES = ("et", "nc", "wt")


@dataclass(frozen=True)
class RegionMasks:
    """ET, NC and whole-tumor masks; ED is WT minus the other two."""

    et: np.ndarray
    nc: np.ndarray
    wt: np.ndarray

    def __post_init__(self):
        if not (self.et.shape == self.nc.shape == self.wt.shape):
            raise ValueError("region masks disagree on shape")
        if (self.et & ~self.wt).any() or (self.nc & ~self.wt).any():
            raise ValueError("ET and NC must be subsets of WT")


def compose_regions(labels: LabelVolume) -> RegionMasks:
    """ET = {2}, NC = {3}, WT = {1, 2, 3}."""
    data = labels.data
    return RegionMasks(et=data == 2, nc=data == 3, wt=data >= 1)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks count as a perfect match."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


@dataclass(frozen=True)
class DiceReport:
    """Per-case Dice scores plus mean and population std per region."""

    case_ids: tuple[str, ...]
    scores: dict[str, tuple[float, ...]]

    def __post_init__(self):
        for name, values in self.scores.items():
            if len(values) != len(self.case_ids):
                raise ValueError(f"{name}: one score per case required")
            if any(not 0.0 <= v <= 1.0 for v in values):
                raise ValueError(f"{name}: Dice scores must lie in [0, 1]")

    def mean(self, region: str) -> float:
        return float(np.mean(self.scores[region]))

    def std(self, region: str) -> float:
        return float(np.std(self.scores[region]))

    def summary(self) -> dict[str, tuple[float, float]]:
        return {r: (self.mean(r), self.std(r)) for r in REGION_NAMES}


def score_case(predicted: LabelVolume, truth: LabelVolume) -> dict[str, float]:
    pred = compose_regions(predicted)
    ref = compose_regions(truth)
    return {
        "et": dice(pred.et, ref.et),
        "nc": dice(pred.nc, ref.nc),
        "wt": dice(pred.wt, ref.wt),
    }


def evaluate(predict, cases) -> DiceReport:
    """Score a predictor over ground-truthed cases.

    `predict` maps a case to a LabelVolume; each case carries .case_id and
    .labels. Returns the per-case report with aggregate statistics.
    """
    cases = list(cases)
    if not cases:
        raise ValueError("evaluation dataset is empty")
    ids = []
    per_region: dict[str, list[float]] = {r: [] for r in REGION_NAMES}
    for case in cases:
        result = score_case(predict(case), case.labels)
        ids.append(case.case_id)
        for region in REGION_NAMES:
            per_region[region].append(result[region])
    return DiceReport(
        case_ids=tuple(ids),
        scores={r: tuple(v) for r, v in per_region.items()},
    )


def write_report_csv(report: DiceReport, path) -> None:
    """case_id, dsc_et, dsc_nc, dsc_wt rows plus mean/std footer rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "dsc_et", "dsc_nc", "dsc_wt"])
        for i, case_id in enumerate(report.case_ids):
            writer.writerow(
                [case_id] + [f"{report.scores[r][i]:.6f}" for r in REGION_NAMES]
            )
        writer.writerow(["mean"] + [f"{report.mean(r):.6f}" for r in REGION_NAMES])
        writer.writerow(["std"] + [f"{report.std(r):.6f}" for r in REGION_NAMES])


def read_report_csv(path) -> DiceReport:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    body = [row for row in rows[1:] if row and row[0] not in ("mean", "std")]
    return DiceReport(
        case_ids=tuple(row[0] for row in body),
        scores={
            r: tuple(float(row[i + 1]) for row in body)
            for i, r in enumerate(REGION_NAMES)
        },
    )
