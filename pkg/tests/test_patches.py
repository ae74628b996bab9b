import numpy as np
import pytest

from flimseg.markers import Marker, MarkerSet
from flimseg.patches import (
    NormStats,
    concat_datasets,
    extract_patches,
    marker_stats,
    marker_stats_pooled,
)
from flimseg.volume import Volume


def _volume(data):
    return Volume(data=np.asarray(data, dtype=np.float32))


def _marker_set(voxels, image_id="img0"):
    return MarkerSet(
        image_id=image_id, modality="FLAIR",
        markers=(Marker(id=1, label="ED", voxels=tuple(voxels)),),
    )


def test_marker_stats_hand_computed():
    vol = np.zeros((1, 4, 4, 4))
    vol[0, 0, 0, 0], vol[0, 1, 1, 1], vol[0, 2, 2, 2] = 1.0, 2.0, 3.0
    stats = marker_stats(_volume(vol), _marker_set([(0, 0, 0), (1, 1, 1), (2, 2, 2)]))
    assert stats.mean[0] == pytest.approx(2.0)
    # population std of {1,2,3} = sqrt(2/3)
    assert stats.std[0] == pytest.approx(0.816496580927726, abs=1e-6)


def test_constant_volume_std_clamped():
    vol = _volume(np.full((1, 4, 4, 4), 5.0))
    stats = marker_stats(vol, _marker_set([(0, 0, 0), (1, 1, 1)]))
    assert stats.mean[0] == pytest.approx(5.0)
    assert stats.std[0] == pytest.approx(1e-6)
    pd = extract_patches(vol, _marker_set([(1, 1, 1)]), 3, stats)
    assert np.all(pd.patches == 0.0)


def test_per_channel_independence():
    data = np.zeros((2, 4, 4, 4))
    data[0, 0, 0, 0], data[0, 1, 1, 1] = 1.0, 3.0
    data[1, 0, 0, 0], data[1, 1, 1, 1] = 10.0, 30.0
    stats = marker_stats(_volume(data), _marker_set([(0, 0, 0), (1, 1, 1)]))
    assert stats.mean[0] == pytest.approx(2.0)
    assert stats.mean[1] == pytest.approx(20.0)
    assert stats.std[1] == pytest.approx(10 * stats.std[0], rel=1e-5)


def test_patch_shape_and_count():
    rng = np.random.default_rng(0)
    vol = _volume(rng.normal(size=(1, 8, 8, 8)))
    voxels = [(2, 2, 2), (3, 3, 3), (4, 4, 4), (5, 5, 5), (2, 5, 3)]
    ms = _marker_set(voxels)
    pd = extract_patches(vol, ms, 3, marker_stats(vol, ms))
    assert pd.patches.shape == (5, 27)
    assert len(pd) == ms.total_voxels()
    with pytest.raises(ValueError, match="odd"):
        extract_patches(vol, ms, 2, marker_stats(vol, ms))


def test_corner_patch_padding_count():
    # independent oracle: count in-bounds offsets around the corner voxel
    in_bounds = sum(
        1
        for dz in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dx in (-1, 0, 1)
        if 0 <= dz and 0 <= dy and 0 <= dx
    )
    assert in_bounds == 8
    rng = np.random.default_rng(1)
    vol = _volume(rng.normal(size=(1, 8, 8, 8)) + 5.0)
    ms = _marker_set([(0, 0, 0), (4, 4, 4)])
    stats = marker_stats(vol, ms)
    pd = extract_patches(vol, ms, 3, stats)
    corner = pd.patches[0]
    assert int((corner == 0.0).sum()) == 27 - in_bounds == 19


def test_vectorization_order_is_channel_major():
    data = np.zeros((2, 4, 4, 4))
    data[1, 1, 1, 1] = 7.0  # center voxel of channel 1
    vol = _volume(data)
    stats = NormStats(mean=np.zeros(2), std=np.ones(2))
    pd = extract_patches(vol, _marker_set([(1, 1, 1)]), 3, stats)
    patch = pd.patches[0]
    # (c, dz, dy, dx) ordering: channel-1 center sits at 27 + 13
    assert patch[27 + 13] == pytest.approx(7.0)
    assert patch[13] == pytest.approx(0.0)


def test_center_values_zero_mean_after_centralization():
    rng = np.random.default_rng(42)
    for _ in range(10):
        vol = _volume(rng.normal(size=(2, 8, 8, 8)) * 3 + 1)
        voxels = set()
        while len(voxels) < 12:
            voxels.add(tuple(int(c) for c in rng.integers(0, 8, size=3)))
        ms = _marker_set(sorted(voxels))
        stats = marker_stats(vol, ms)
        pd = extract_patches(vol, ms, 3, stats)
        for c in range(2):
            centers = pd.patches[:, c * 27 + 13]
            assert abs(centers.mean()) < 1e-5


def test_translation_consistency():
    rng = np.random.default_rng(3)
    base = rng.normal(size=(1, 10, 10, 10)).astype(np.float32)
    shifted = np.roll(base, shift=(2, 1, 3), axis=(1, 2, 3))
    voxels = [(3, 3, 3), (4, 5, 4)]
    moved = [(z + 2, y + 1, x + 3) for z, y, x in voxels]
    ms_a, ms_b = _marker_set(voxels), _marker_set(moved)
    stats_a = marker_stats(_volume(base), ms_a)
    stats_b = marker_stats(_volume(shifted), ms_b)
    pd_a = extract_patches(_volume(base), ms_a, 3, stats_a)
    pd_b = extract_patches(_volume(shifted), ms_b, 3, stats_b)
    assert np.allclose(pd_a.patches, pd_b.patches, atol=1e-6)


def test_ordering_by_marker_id_then_voxel_order():
    rng = np.random.default_rng(4)
    vol = _volume(rng.normal(size=(1, 8, 8, 8)))
    ms = MarkerSet(
        image_id="img0", modality="FLAIR",
        markers=(
            Marker(id=2, label="ET", voxels=((5, 5, 5), (1, 2, 3))),
            Marker(id=1, label="ED", voxels=((4, 4, 4),)),
        ),
    )
    pd = extract_patches(vol, ms, 3, marker_stats(vol, ms))
    assert [o.marker_id for o in pd.origins] == [1, 2, 2]
    assert pd.origins[1].voxel == (5, 5, 5)


def test_pooled_stats_and_concat():
    rng = np.random.default_rng(5)
    vols = [_volume(rng.normal(size=(1, 6, 6, 6)) + i) for i in range(2)]
    sets = [_marker_set([(2, 2, 2), (3, 3, 3)], image_id=f"img{i}") for i in range(2)]
    pooled = marker_stats_pooled(vols, sets)
    values = np.concatenate(
        [[v.data[0, 2, 2, 2], v.data[0, 3, 3, 3]] for v in vols]
    )
    assert pooled.mean[0] == pytest.approx(values.mean(), abs=1e-6)
    merged = concat_datasets(
        [extract_patches(v, m, 3, pooled) for v, m in zip(vols, sets)]
    )
    assert len(merged) == 4
    assert merged.origins[0].image_id == "img0"
    assert merged.origins[2].image_id == "img1"
    groups = merged.marker_groups()
    assert set(groups) == {("img0", 1), ("img1", 1)}
