import numpy as np
import pytest

from flimseg.markers import (
    Marker,
    MarkerSet,
    check_marker_balance,
    load_markers,
    project_markers,
    save_markers,
)
from flimseg.volume import Volume


def _set(sizes=(5, 5), seed=0):
    rng = np.random.default_rng(seed)
    markers = []
    for mid, n in enumerate(sizes, start=1):
        voxels = set()
        while len(voxels) < n:
            voxels.add(tuple(int(c) for c in rng.integers(0, 8, size=3)))
        markers.append(Marker(id=mid, label="ED", voxels=tuple(sorted(voxels))))
    return MarkerSet(image_id="img0", modality="FLAIR", markers=tuple(markers))


def test_round_trip(tmp_path):
    ms = _set()
    path = tmp_path / "m.mk"
    save_markers(ms, path)
    again = load_markers(path)
    assert again == ms


def test_counts_from_file(tmp_path):
    ms = _set(sizes=(5, 5))
    path = tmp_path / "m.mk"
    save_markers(ms, path)
    assert len(load_markers(path).markers) == 2


def test_invariants():
    with pytest.raises(ValueError, match="repeats"):
        Marker(id=1, label="ED", voxels=((1, 1, 1), (1, 1, 1)))
    with pytest.raises(ValueError, match="negative"):
        Marker(id=1, label="ED", voxels=((-1, 0, 0),))
    with pytest.raises(ValueError, match="no voxels"):
        Marker(id=1, label="ED", voxels=())
    with pytest.raises(ValueError, match="duplicate marker ids"):
        MarkerSet(
            image_id="i",
            modality="FLAIR",
            markers=(
                Marker(id=1, label="ED", voxels=((0, 0, 0),)),
                Marker(id=1, label="ET", voxels=((1, 1, 1),)),
            ),
        )


def test_bind_check():
    ms = MarkerSet(
        image_id="i", modality="FLAIR",
        markers=(Marker(id=1, label="ED", voxels=((0, 0, 7),)),),
    )
    small = Volume(data=np.zeros((1, 4, 4, 4), dtype=np.float32))
    with pytest.raises(ValueError, match="outside extent"):
        ms.bind_check(small)
    big = Volume(data=np.zeros((1, 8, 8, 8), dtype=np.float32))
    ms.bind_check(big)


def test_projection_stride1_identity():
    ms = _set()
    assert project_markers(ms, 1) == ms


def test_projection_floor_and_dedup():
    ms = MarkerSet(
        image_id="i", modality="FLAIR",
        markers=(Marker(id=1, label="ED", voxels=((0, 0, 0), (1, 1, 1))),),
    )
    projected = project_markers(ms, 2)
    assert projected.markers[0].voxels == ((0, 0, 0),)
    ms2 = MarkerSet(
        image_id="i", modality="FLAIR",
        markers=(Marker(id=1, label="ED", voxels=((4, 6, 2),)),),
    )
    assert project_markers(ms2, 2).markers[0].voxels == ((2, 3, 1),)


def test_projection_composition_and_monotonicity():
    rng = np.random.default_rng(5)
    for _ in range(20):
        ms = _set(sizes=(rng.integers(1, 20), rng.integers(1, 20)), seed=rng.integers(1e6))
        for s1, s2 in ((2, 2), (2, 4), (4, 2)):
            chained = project_markers(project_markers(ms, s1), s2)
            direct = project_markers(ms, s1 * s2)
            assert chained == direct
        for s in (2, 3, 4):
            projected = project_markers(ms, s)
            assert projected.total_voxels() <= ms.total_voxels()


def test_balance_report():
    assert check_marker_balance(_set(sizes=(10, 10, 10)))["ratio"] == 1.0
    assert not check_marker_balance(_set(sizes=(10, 10, 10)))["warning"]
    report = check_marker_balance(_set(sizes=(10, 30)))
    assert report["ratio"] == pytest.approx(3.0)
    assert report["warning"]
    assert check_marker_balance(_set(sizes=(7,)))["ratio"] == 1.0
