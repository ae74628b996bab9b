"""Deterministic synthetic GBM-like phantoms.

Each case emulates a skull-stripped, lesion-centered crop: the field of
view is all brain tissue holding one nested lesion, a necrotic core inside
an enhancing rim inside edema. On FLAIR the edema splits into a saturated
sub-region and a textured intermediate sub-region; on T1Gd the rim is
bright and the core dark, both mildly textured. Smooth multiplicative bias
and Gaussian noise sit on top. Everything is reproducible from
(spec.seed, case_seed).
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_erosion, gaussian_filter

from .markers import Marker, MarkerSet, save_markers
from .volume import LabelVolume, Volume, write_labels, write_volume

SUBREGION_CODES = {
    "background": 0,
    "brain": 1,
    "ed_intermediate": 2,
    "ed_saturated": 3,
    "et": 4,
    "nc": 5,
    "distractor": 6,
    "cyst": 7,
}
REGION_NAMES = ("ed_saturated", "ed_intermediate", "et", "nc")


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 48
    seed: int = 0
    noise_sigma: float = 0.015
    bias_amplitude: float = 0.06
    lesion_axis_range: tuple[float, float] = (0.34, 0.44)  # fraction of size
    core_level: float = 0.45      # lesion shells in units of the deformed radius
    rim_level: float = 0.68
    min_region_fraction: float = 0.008  # of the voxel count, per region
    # the intermediate edema level sits at the pooled marker mean of
    # {saturated, intermediate, healthy}, so its patches carry no net
    # intensity offset and its texture is what filters can latch onto
    flair_levels: dict = field(
        default_factory=lambda: {
            "brain": 0.35, "ed_intermediate": 0.625, "ed_saturated": 0.90,
            "et": 0.50, "nc": 0.45, "distractor": 0.88, "cyst": 0.40,
        }
    )
    t1gd_levels: dict = field(
        default_factory=lambda: {
            "brain": 0.50, "ed_intermediate": 0.55, "ed_saturated": 0.55,
            "et": 0.95, "nc": 0.10, "distractor": 0.92, "cyst": 0.12,
        }
    )
    # per-region texture: ("checker", amp) is a voxel-scale alternating
    # pattern (infiltrative-looking grain), ("smooth", amp) band-limited noise
    flair_texture: dict = field(
        default_factory=lambda: {"ed_intermediate": ("checker", 0.24)}
    )
    t1gd_texture: dict = field(
        default_factory=lambda: {"et": ("smooth", 0.06), "nc": ("smooth", 0.08)}
    )
    # appearance variation across cases: every intensity level is scaled by
    # 1 + U(-jitter, jitter) per case, and healthy tissue carries its own
    # structured (label-irrelevant) texture
    level_jitter: float = 0.0
    healthy_texture_amp: float = 0.02
    # small bright structures in healthy tissue (vessel/calcification look):
    # lesion-like intensity, background label; count drawn from this range
    distractor_count: tuple[int, int] = (0, 0)
    distractor_radius: tuple[float, float] = (0.05, 0.09)  # fraction of size
    # dark cyst-like structures in healthy tissue (core-like intensity,
    # background label), and the fraction of the enhancing rim carved away
    cyst_count: tuple[int, int] = (0, 0)
    cyst_radius: tuple[float, float] = (0.05, 0.10)
    rim_gap_fraction: float = 0.0

    def __post_init__(self):
        if self.size < 16 or self.size % 8:
            raise ValueError("size must be >= 16 and divisible by 8")

    @property
    def min_region_voxels(self) -> int:
        return max(60, int(self.min_region_fraction * self.size ** 3))


@dataclass(frozen=True)
class PhantomCase:
    case_id: str
    flair: Volume
    t1gd: Volume
    labels: LabelVolume
    regions: dict[str, np.ndarray]


def _smooth_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    """Gaussian-smoothed white noise scaled to [-1, 1]."""
    noise = gaussian_filter(rng.normal(size=(size, size, size)), sigma=sigma)
    return noise / np.abs(noise).max()


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def _build_geometry(spec: PhantomSpec, rng: np.random.Generator):
    size = spec.size
    grid = np.stack(
        np.meshgrid(*[np.arange(size)] * 3, indexing="ij"), axis=-1
    ).astype(np.float64)

    lesion_axes = size * rng.uniform(*spec.lesion_axis_range, size=3)
    center = size / 2 + rng.uniform(-0.04, 0.04, size=3) * size
    rotation = _random_rotation(rng)
    rel = (grid - center) @ rotation / lesion_axes
    radius = np.sqrt((rel ** 2).sum(axis=-1))
    deformed = radius + 0.12 * _smooth_field(rng, size, sigma=6.0)

    nc = deformed <= spec.core_level
    et = (deformed > spec.core_level) & (deformed <= spec.rim_level)
    ed = (deformed > spec.rim_level) & (deformed <= 1.0)

    split = _smooth_field(rng, size, sigma=9.0)
    if ed.any():
        threshold = np.median(split[ed])
        ed_sat = ed & (split > threshold)
        ed_int = ed & ~ed_sat
    else:
        ed_sat = ed_int = ed

    if spec.rim_gap_fraction > 0 and et.any():
        # carve per-case gaps out of the enhancing rim; carved voxels
        # become plain edema, so the bright ring is incomplete
        gap_field = _smooth_field(rng, size, sigma=4.0)
        threshold = np.quantile(gap_field[et], spec.rim_gap_fraction)
        gap = et & (gap_field <= threshold)
        et = et & ~gap
        ed = ed | gap
        if ed.any():
            ed_sat = ed & (split > np.median(split[ed]))
            ed_int = ed & ~ed_sat

    lesion = deformed <= 1.0

    def blobs(count_range, radius_range, occupied):
        out = np.zeros_like(lesion)
        count = rng.integers(count_range[0], count_range[1] + 1)
        for _ in range(int(count)):
            r = size * rng.uniform(*radius_range)
            margin = r + 2
            c = rng.uniform(margin, size - margin, size=3)
            d2 = ((grid - c) ** 2).sum(axis=-1)
            out |= (d2 <= r * r) & ~occupied
        return out

    distractors = blobs(spec.distractor_count, spec.distractor_radius, lesion)
    cysts = blobs(spec.cyst_count, spec.cyst_radius, lesion | distractors)
    return {
        "nc": nc, "et": et, "ed_saturated": ed_sat, "ed_intermediate": ed_int,
        "distractor": distractors, "cyst": cysts,
    }


def _checker(size: int, sign: float) -> np.ndarray:
    z, y, x = np.meshgrid(*[np.arange(size)] * 3, indexing="ij")
    return sign * ((z + y + x) % 2 * 2.0 - 1.0)


def _paint(levels: dict, textures: dict, regions, rng, spec: PhantomSpec) -> np.ndarray:
    size = spec.size
    # one global gain per case plus a small per-region wobble, so appearance
    # varies across cases without ever crossing the intensity orderings
    gain = 1.0 + rng.uniform(-spec.level_jitter, spec.level_jitter)
    jitter = {
        name: gain * (1.0 + rng.uniform(-spec.level_jitter / 4, spec.level_jitter / 4))
        for name in levels
    }
    img = np.full((size, size, size), levels["brain"] * jitter["brain"], dtype=np.float64)
    img += spec.healthy_texture_amp * _smooth_field(rng, size, sigma=2.5)
    for name in ("distractor", "cyst", "ed_intermediate", "ed_saturated", "et", "nc"):
        img[regions[name]] = levels[name] * jitter[name]
        kind, amp = textures.get(name, ("smooth", 0.0))
        if amp:
            if kind == "checker":
                pattern = _checker(size, 1.0 if rng.random() < 0.5 else -1.0)
            else:
                pattern = _smooth_field(rng, size, sigma=1.2)
            img[regions[name]] += amp * pattern[regions[name]]
    bias = 1.0 + spec.bias_amplitude * _smooth_field(rng, size, sigma=12.0)
    img *= bias
    img += rng.normal(scale=spec.noise_sigma, size=img.shape)
    return img.astype(np.float32)


def _region_means(img: np.ndarray, regions) -> dict[str, float]:
    means = {name: float(img[mask].mean()) for name, mask in regions.items() if mask.any()}
    healthy = ~(regions["ed_saturated"] | regions["ed_intermediate"]
                | regions["et"] | regions["nc"]
                | regions.get("distractor", False) | regions.get("cyst", False))
    means["brain"] = float(img[healthy].mean())
    return means


def generate_case(spec: PhantomSpec, case_seed: int) -> PhantomCase:
    """One phantom case, bit-deterministic for (spec.seed, case_seed)."""
    margin = 0.05
    for attempt in range(24):
        rng = np.random.default_rng(
            np.random.SeedSequence(spec.seed, spawn_key=(case_seed, attempt))
        )
        regions = _build_geometry(spec, rng)
        if all(regions[name].sum() >= spec.min_region_voxels for name in REGION_NAMES):
            break
    else:
        raise ValueError(
            f"lesion cannot fit: a region stayed under {spec.min_region_voxels} "
            f"voxels after 24 attempts (case_seed={case_seed})"
        )

    flair = _paint(spec.flair_levels, spec.flair_texture, regions, rng, spec)
    t1gd = _paint(spec.t1gd_levels, spec.t1gd_texture, regions, rng, spec)

    fm = _region_means(flair, regions)
    tm = _region_means(t1gd, regions)
    if not (fm["ed_saturated"] > fm["ed_intermediate"] + margin > fm["brain"] + 2 * margin):
        raise AssertionError(f"FLAIR edema ordering violated: {fm}")
    if not (tm["et"] > tm["brain"] + margin and tm["nc"] < tm["brain"] - margin):
        raise AssertionError(f"T1Gd rim/core ordering violated: {tm}")

    labels = np.zeros((spec.size,) * 3, dtype=np.uint8)
    labels[regions["ed_saturated"] | regions["ed_intermediate"]] = 1
    labels[regions["et"]] = 2
    labels[regions["nc"]] = 3

    region_masks = {
        "brain": np.ones_like(labels, dtype=bool),
        "ed_saturated": regions["ed_saturated"],
        "ed_intermediate": regions["ed_intermediate"],
        "et": regions["et"],
        "nc": regions["nc"],
        "distractor": regions["distractor"],
        "cyst": regions["cyst"],
    }
    return PhantomCase(
        case_id=f"case_{case_seed:03d}",
        flair=Volume(data=flair[np.newaxis]),
        t1gd=Volume(data=t1gd[np.newaxis]),
        labels=LabelVolume(data=labels),
        regions=region_masks,
    )


def encode_subregions(case: PhantomCase) -> Volume:
    """Single-channel code volume persisting the generator's region masks."""
    codes = np.full(case.labels.spatial_shape, SUBREGION_CODES["brain"], dtype=np.float32)
    for name in REGION_NAMES:
        codes[case.regions[name]] = SUBREGION_CODES[name]
    return Volume(data=codes[np.newaxis])


def decode_subregions(vol: Volume) -> dict[str, np.ndarray]:
    codes = vol.data[0].astype(np.int64)
    regions = {name: codes == code for name, code in SUBREGION_CODES.items() if code > 1}
    regions["healthy"] = codes == SUBREGION_CODES["brain"]
    # the whole field of view is brain tissue in these lesion-centered crops
    regions["brain"] = codes >= 1
    return regions


def _grow_blob(mask: np.ndarray, n: int, rng: np.random.Generator) -> list[tuple[int, int, int]]:
    """Connected scribble of n voxels grown by BFS inside a region mask."""
    coords = np.argwhere(mask)
    if len(coords) < n:
        raise ValueError(f"region holds {len(coords)} voxels, marker needs {n}")
    inside = set(map(tuple, coords))
    order = rng.permutation(len(coords))
    for start_idx in order[: min(len(order), 16)]:
        start = tuple(coords[start_idx])
        blob = [start]
        seen = {start}
        queue = [start]
        while queue and len(blob) < n:
            z, y, x = queue.pop(0)
            for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                nxt = (z + dz, y + dy, x + dx)
                if nxt in inside and nxt not in seen:
                    seen.add(nxt)
                    blob.append(nxt)
                    queue.append(nxt)
                    if len(blob) == n:
                        break
        if len(blob) == n:
            return blob
    raise ValueError(f"could not grow a connected {n}-voxel marker in the region")


def synth_markers(case: PhantomCase, per_region_voxels: int = 30, seed: int = 0) -> dict[str, MarkerSet]:
    """Equal-size scripted scribbles per modality.

    FLAIR gets one marker in each edema sub-region, T1Gd one in the rim and
    one in the core; both get a healthy-tissue marker, all of the same size.
    Scribbles grow inside the eroded region, the way a human stays clear of
    region boundaries.
    """
    empty = np.zeros_like(case.labels.data, dtype=bool)
    healthy = (
        (case.labels.data == 0)
        & ~case.regions.get("distractor", empty)
        & ~case.regions.get("cyst", empty)
    )
    plans = {
        "FLAIR": [
            ("ed_saturated", "ED"),
            ("ed_intermediate", "ED"),
            ("healthy", "OTHER"),
        ],
        "T1Gd": [("et", "ET"), ("nc", "NC"), ("healthy", "OTHER")],
    }
    case_key = zlib.crc32(case.case_id.encode("utf-8"))
    out = {}
    for mi, (modality, plan) in enumerate(plans.items()):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(case_key, mi)))
        markers = []
        for marker_id, (region, label) in enumerate(plan, start=1):
            mask = healthy if region == "healthy" else case.regions[region]
            eroded = binary_erosion(mask)
            blob = None
            if eroded.sum() >= per_region_voxels:
                try:
                    blob = _grow_blob(eroded, per_region_voxels, rng)
                except ValueError:
                    blob = None  # eroded region too fragmented; use the full one
            if blob is None:
                blob = _grow_blob(mask, per_region_voxels, rng)
            markers.append(Marker(id=marker_id, label=label, voxels=tuple(blob)))
        out[modality] = MarkerSet(
            image_id=case.case_id, modality=modality, markers=tuple(markers)
        )
    return out


def split_counts(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    counts = [int(np.floor(n * f)) for f in fractions]
    for i in range(n - sum(counts)):
        counts[i % 3] += 1
    if any(c == 0 for c, f in zip(counts, fractions) if f > 0) or counts[0] < 1:
        raise ValueError(f"n={n} too small for split {fractions}")
    return tuple(counts)


def generate_dataset(
    spec: PhantomSpec,
    n: int,
    out_dir,
    split: tuple[float, float, float] = (0.7, 0.1, 0.2),
    marked_train: int = 8,
    per_region_voxels: int = 30,
) -> dict:
    """Write n cases and a manifest with train/val/test membership.

    Every case gets scripted markers for both modalities; the first
    `marked_train` training cases are listed as the marked subset used for
    filter estimation. Returns the manifest.
    """
    n_train, n_val, n_test = split_counts(n, split)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    case_ids = []
    for case_seed in range(n):
        case = generate_case(spec, case_seed)
        case_dir = out_dir / case.case_id
        case_dir.mkdir(exist_ok=True)
        write_volume(case.flair, case_dir / "flair.mvol")
        write_volume(case.t1gd, case_dir / "t1gd.mvol")
        write_labels(case.labels, case_dir / "labels.mvol")
        write_volume(encode_subregions(case), case_dir / "subregions.mvol")
        marker_sets = synth_markers(case, per_region_voxels, seed=spec.seed)
        save_markers(marker_sets["FLAIR"], case_dir / "markers_flair.mk")
        save_markers(marker_sets["T1Gd"], case_dir / "markers_t1gd.mk")
        case_ids.append(case.case_id)

    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(999,)))
    order = [case_ids[i] for i in rng.permutation(n)]
    train = sorted(order[:n_train])
    val = sorted(order[n_train : n_train + n_val])
    test = sorted(order[n_train + n_val :])
    if marked_train > len(train):
        raise ValueError(f"cannot mark {marked_train} cases with only {len(train)} in train")
    manifest = {
        "size": spec.size,
        "seed": spec.seed,
        "cases": case_ids,
        "train": train,
        "val": val,
        "test": test,
        "marked": train[:marked_train],
    }
    with open(out_dir / "manifest", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
