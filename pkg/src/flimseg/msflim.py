"""Multi-step first-layer filter generation and selection.

One step clusters each marker's patches into a per-marker number of first
candidates, then re-clusters those candidates per image into the step's
per-image count. Varying the two counts across steps explores the patch
space at different granularities; a human (or the scripted oracle below)
then picks the filters that activate every region of interest.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import convops
from .clustering import minibatch_kmeans
from .encoder import Filter, FilterBank, unit_normalize
from .markers import MarkerSet
from .patches import NormStats, extract_patches, marker_stats_pooled, normalize_volume
from .volume import Volume

ORACLE_TAU = 0.3


@dataclass(frozen=True)
class RunParams:
    """Cluster counts for one step: per marker first, then per image."""

    clusters_per_marker: int
    clusters_per_image: int
    seed: int = 0
    kernel: int = 3

    def __post_init__(self):
        if self.clusters_per_marker < 1 or self.clusters_per_image < 1:
            raise ValueError("cluster counts must be >= 1")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError(f"kernel must be odd, got {self.kernel}")


@dataclass(frozen=True)
class CandidateSet:
    """Unit-norm candidate filters of one step, grouped by source image."""

    run_id: str
    params: RunParams
    norm: NormStats
    candidates: dict[str, tuple[Filter, ...]]
    first_candidate_counts: dict[str, int]

    def __len__(self) -> int:
        return sum(len(v) for v in self.candidates.values())

    def get(self, image_id: str, index: int) -> Filter:
        group = self.candidates.get(image_id)
        if group is None or not 0 <= index < len(group):
            raise KeyError(f"run {self.run_id}: no candidate ({image_id!r}, {index})")
        return group[index]


Pick = tuple[str, str, int]  # (run_id, image_id, candidate index)


class SelectionLedger:
    """Ordered, duplicate-free record of the picks that form the final bank."""

    def __init__(self, target_bank_size: int = 16):
        if target_bank_size < 1:
            raise ValueError("target bank size must be >= 1")
        self.target_bank_size = target_bank_size
        self.chosen: list[Pick] = []

    def add(self, run_id: str, image_id: str, index: int) -> None:
        pick = (run_id, image_id, int(index))
        if pick in self.chosen:
            raise ValueError(f"duplicate pick {pick}")
        if len(self.chosen) >= self.target_bank_size:
            raise ValueError(f"ledger already holds {self.target_bank_size} picks")
        self.chosen.append(pick)

    def remove(self, run_id: str, image_id: str, index: int) -> None:
        self.chosen.remove((run_id, image_id, int(index)))

    def to_dict(self) -> dict:
        return {
            "target_bank_size": self.target_bank_size,
            "chosen": [list(p) for p in self.chosen],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SelectionLedger":
        ledger = cls(target_bank_size=doc["target_bank_size"])
        for run_id, image_id, index in doc["chosen"]:
            ledger.add(run_id, image_id, index)
        return ledger


def run_msflim_step(
    images: Sequence[Volume],
    marker_sets: Sequence[MarkerSet],
    params: RunParams,
    run_id: str = "run",
    stats: NormStats | None = None,
) -> CandidateSet:
    """Two-stage clustering of marker patches into per-image candidates.

    Stage one finds up to clusters_per_marker centers per marker; stage two
    clusters each image's pooled centers into up to clusters_per_image
    filters. Fewer distinct inputs than requested clusters yield fewer
    centers (the degenerate clamp of the K-means primitive).
    """
    if len(images) != len(marker_sets) or not images:
        raise ValueError("need one marker set per image, and at least one image")
    for ms in marker_sets:
        if not ms.markers:
            raise ValueError(f"image {ms.image_id!r} has no markers")
    if stats is None:
        stats = marker_stats_pooled(images, marker_sets)

    seeds = iter(
        np.random.SeedSequence(params.seed).generate_state(
            sum(len(ms.markers) + 1 for ms in marker_sets)
        )
    )
    candidates: dict[str, tuple[Filter, ...]] = {}
    first_counts: dict[str, int] = {}
    for vol, ms in zip(images, marker_sets):
        pd = extract_patches(vol, ms, params.kernel, stats)
        groups = pd.marker_groups()
        first = [
            minibatch_kmeans(
                pd.patches[rows], params.clusters_per_marker, seed=int(next(seeds))
            ).centers
            for rows in groups.values()
        ]
        first = np.concatenate(first)
        first_counts[ms.image_id] = first.shape[0]
        second = minibatch_kmeans(
            first, params.clusters_per_image, seed=int(next(seeds))
        ).centers
        weights = unit_normalize(second)
        candidates[ms.image_id] = tuple(
            Filter(
                weights=w,
                source={"origin": run_id, "image": ms.image_id, "candidate": i},
            )
            for i, w in enumerate(weights)
        )
    return CandidateSet(
        run_id=run_id,
        params=params,
        norm=stats,
        candidates=candidates,
        first_candidate_counts=first_counts,
    )


def activation_map(image: Volume, candidate: Filter, norm: NormStats) -> Volume:
    """Single-channel ReLU response map of one filter, no pooling."""
    length = candidate.weights.shape[0]
    kernel = round((length // image.channels) ** (1 / 3))
    if kernel ** 3 * image.channels != length:
        raise ValueError(
            f"filter length {length} does not match image channels {image.channels}"
        )
    x = np.ascontiguousarray(normalize_volume(image, norm).transpose(1, 2, 3, 0))
    out, _ = convops.conv3d(x, candidate.weights[np.newaxis], kernel)
    np.maximum(out, 0.0, out=out)
    return Volume(
        data=np.ascontiguousarray(out.transpose(3, 0, 1, 2)), spacing_mm=image.spacing_mm
    )


def score_candidate_against_region(act: Volume, region_mask: np.ndarray) -> float:
    """Soft IoU between the min-max-normalized activation and a binary mask."""
    mask = np.asarray(region_mask)
    if mask.shape != act.spatial_shape:
        raise ValueError(f"mask shape {mask.shape} != activation {act.spatial_shape}")
    mask = mask.astype(np.float64)
    if mask.sum() == 0:
        raise ValueError("region mask is empty")
    a = act.data[0].astype(np.float64)
    lo, hi = a.min(), a.max()
    a = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    denominator = np.maximum(a, mask).sum()
    return float(np.minimum(a, mask).sum() / denominator) if denominator > 0 else 0.0


def finalize_bank(
    runs: Sequence[CandidateSet], ledger: SelectionLedger, norm: NormStats
) -> FilterBank:
    """Assemble the layer-1 bank from the ledger's picks, provenance intact."""
    if not ledger.chosen:
        raise ValueError("selection ledger is empty")
    if len(set(ledger.chosen)) != len(ledger.chosen):
        raise ValueError("selection ledger repeats a pick")
    by_id = {cs.run_id: cs for cs in runs}
    filters = []
    for run_id, image_id, index in ledger.chosen:
        if run_id not in by_id:
            raise KeyError(f"ledger references unknown run {run_id!r}")
        filters.append(by_id[run_id].get(image_id, index))
    kernel = runs[0].params.kernel
    return FilterBank(
        layer_index=1,
        kernel=kernel,
        in_channels=norm.channels,
        filters=tuple(filters),
        norm=norm,
    )


def score_all_candidates(
    runs: Sequence[CandidateSet],
    images: Mapping[str, Volume],
    regions_by_image: Mapping[str, Mapping[str, np.ndarray]],
    cross_image: bool = True,
) -> dict[Pick, dict[str, float]]:
    """Soft-IoU of every candidate against region masks.

    With cross_image=True (the default) each candidate is scored on every
    marked image and the per-region scores are averaged, the way a user
    verifies that a filter activates the region across the training images
    rather than on its source image alone. cross_image=False scores only
    on the candidate's source image.
    """
    collected = _collect_scores(runs, images, regions_by_image, cross_image)
    return {
        pick: {name: float(np.mean(vals)) for name, vals in per.items()}
        for pick, per in collected.items()
    }


def _collect_scores(
    runs: Sequence[CandidateSet],
    images: Mapping[str, Volume],
    regions_by_image: Mapping[str, Mapping[str, np.ndarray]],
    cross_image: bool = True,
) -> dict[Pick, dict[str, list[float]]]:
    """Per-image soft-IoU lists per (candidate, region).

    One convolution scores a run's whole candidate stack on one image.
    """
    collected: dict[Pick, dict[str, list[float]]] = {}
    for cs in runs:
        picks = [
            (image_id, index)
            for image_id, filters in cs.candidates.items()
            for index in range(len(filters))
        ]
        if not picks:
            continue
        stacked = np.stack([cs.get(img, idx).weights for img, idx in picks])
        kernel = cs.params.kernel
        for target in sorted(regions_by_image):
            x = np.ascontiguousarray(
                normalize_volume(images[target], cs.norm).transpose(1, 2, 3, 0)
            )
            responses, _ = convops.conv3d(x, stacked, kernel)
            np.maximum(responses, 0.0, out=responses)
            for row, (image_id, index) in enumerate(picks):
                if not cross_image and image_id != target:
                    continue
                act = responses[..., row].astype(np.float64)
                lo, hi = act.min(), act.max()
                act = (act - lo) / (hi - lo) if hi > lo else np.zeros_like(act)
                per = collected.setdefault((cs.run_id, image_id, index), {})
                for name, mask in regions_by_image[target].items():
                    if not mask.any():
                        continue
                    m = mask.astype(np.float64)
                    denominator = np.maximum(act, m).sum()
                    iou = float(np.minimum(act, m).sum() / denominator) if denominator else 0.0
                    per.setdefault(name, []).append(iou)
    return collected


def oracle_select(
    runs: Sequence[CandidateSet],
    images: Mapping[str, Volume],
    regions_by_image: Mapping[str, Mapping[str, np.ndarray]],
    target_bank_size: int = 16,
    tau: float = ORACLE_TAU,
    dedup_cosine: float = 0.45,
    coverage_regions: Sequence[str] | None = None,
) -> SelectionLedger:
    """Scripted stand-in for the human selection step.

    Coverage first: for every coverage region, the best-scoring candidate
    is taken and must clear tau (coverage_regions defaults to every scored
    region). Remaining slots fill round-robin over all scored regions by
    per-region rank, so the bank holds several representatives of every
    region rather than near-duplicates of the single best one; candidates
    too similar (cosine > dedup_cosine) to an already chosen filter are
    skipped, mirroring how a user picks visually distinct activations.
    Ties break on the pick key for determinism. If dedup exhausts every
    region's list before the bank is full, the threshold is relaxed and
    the fill continues.
    """
    collected = _collect_scores(runs, images, regions_by_image)
    if not collected:
        raise ValueError("no candidates were scored; check runs and region masks")
    scores = {
        pick: {name: float(np.mean(vals)) for name, vals in per.items()}
        for pick, per in collected.items()
    }
    peaks = {
        pick: {name: float(np.max(vals)) for name, vals in per.items()}
        for pick, per in collected.items()
    }
    region_names = sorted({name for per in scores.values() for name in per})
    if coverage_regions is None:
        coverage_regions = region_names
    by_id = {cs.run_id: cs for cs in runs}

    def weights_of(pick: Pick) -> np.ndarray:
        run_id, image_id, index = pick
        return by_id[run_id].get(image_id, index).weights

    ledger = SelectionLedger(target_bank_size=target_bank_size)
    chosen: list[Pick] = []

    def is_duplicate(pick: Pick, threshold: float) -> bool:
        w = weights_of(pick)
        return any(
            abs(float(np.dot(w, weights_of(other)))) > threshold for other in chosen
        )

    ranked_per_region = {
        region: sorted(
            ((per.get(region, 0.0), pick) for pick, per in scores.items()),
            key=lambda t: (-t[0], t[1]),
        )
        for region in region_names
    }
    for region in coverage_regions:
        _, best_pick = next(
            (s, p) for s, p in ranked_per_region[region] if p not in chosen
        )
        peak = peaks[best_pick].get(region, 0.0)
        if peak < tau:
            raise ValueError(
                f"no candidate reaches tau={tau} for region {region!r} "
                f"(best peak {peak:.3f}); coverage goal unmet"
            )
        ledger.add(*best_pick)
        chosen.append(best_pick)

    threshold = dedup_cosine
    while len(ledger.chosen) < target_bank_size and threshold <= 1.0:
        cursors = {region: 0 for region in region_names}
        stalled: set[str] = set()
        while len(ledger.chosen) < target_bank_size and len(stalled) < len(region_names):
            for region in region_names:
                if len(ledger.chosen) >= target_bank_size:
                    break
                ranked = ranked_per_region[region]
                i = cursors[region]
                while i < len(ranked) and (
                    ranked[i][1] in chosen or is_duplicate(ranked[i][1], threshold)
                ):
                    i += 1
                cursors[region] = i
                if i >= len(ranked):
                    stalled.add(region)
                    continue
                _, pick = ranked[i]
                ledger.add(*pick)
                chosen.append(pick)
                cursors[region] = i + 1
        threshold = threshold + 0.05 if threshold < 1.0 else 1.01
    return ledger
