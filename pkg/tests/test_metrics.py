import numpy as np
import pytest

from flimseg.metrics import (
    DiceReport,
    compose_regions,
    dice,
    evaluate,
    read_report_csv,
    score_case,
    write_report_csv,
)
from flimseg.volume import LabelVolume


def _labels(values):
    return LabelVolume(data=np.asarray(values, dtype=np.uint8))


def test_compose_regions_definitions():
    empty = compose_regions(_labels(np.zeros((2, 2, 2))))
    assert not empty.et.any() and not empty.nc.any() and not empty.wt.any()

    one_ed = np.zeros((2, 2, 2))
    one_ed[0, 0, 0] = 1
    masks = compose_regions(_labels(one_ed))
    assert masks.wt.sum() == 1 and not masks.et.any() and not masks.nc.any()

    mixed = np.zeros((3, 1, 1))
    mixed[0], mixed[1], mixed[2] = 1, 2, 3
    masks = compose_regions(_labels(mixed))
    assert masks.wt.sum() == 3 and masks.et.sum() == 1 and masks.nc.sum() == 1
    assert not (masks.et & ~masks.wt).any()
    assert not (masks.nc & ~masks.wt).any()


def test_dice_values():
    a = np.zeros((2, 2, 2), dtype=bool)
    a[0] = True
    assert dice(a, a) == 1.0
    b = np.zeros_like(a)
    b[1] = True
    assert dice(a, b) == 0.0
    # |a| = |b| = 4, |a ∩ b| = 2 -> 2*2/8
    c = np.zeros_like(a)
    c[0, 0], c[1, 0] = True, True
    assert dice(a, c) == pytest.approx(0.5)
    assert dice(np.zeros_like(a), np.zeros_like(a)) == 1.0
    assert dice(a, c) == dice(c, a)
    with pytest.raises(ValueError, match="shapes"):
        dice(a, np.zeros((3, 3, 3), dtype=bool))


def test_dice_monotone_under_growing_intersection():
    rng = np.random.default_rng(0)
    a = rng.random((4, 4, 4)) < 0.4
    base = np.zeros_like(a)
    scores = []
    coords = np.argwhere(a)
    for take in (2, 5, len(coords)):
        b = base.copy()
        for z, y, x in coords[:take]:
            b[z, y, x] = True
        extra = np.argwhere(~a)[: len(coords) - take]
        for z, y, x in extra:
            b[z, y, x] = True  # keep |b| fixed
        scores.append(dice(a, b))
    assert scores == sorted(scores)


def test_evaluate_and_aggregates():
    truth = np.zeros((2, 2, 2))
    truth[0] = 1

    class Case:
        def __init__(self, cid, labels):
            self.case_id = cid
            self.labels = _labels(labels)

    cases = [Case("a", truth), Case("b", truth)]
    report = evaluate(lambda case: case.labels, cases)
    assert report.case_ids == ("a", "b")
    for region in ("et", "nc", "wt"):
        assert report.mean(region) == 1.0
        assert report.std(region) == 0.0

    report = DiceReport(case_ids=("a", "b"), scores={
        "et": (1.0, 1.0), "nc": (1.0, 1.0), "wt": (0.6, 0.8),
    })
    assert report.mean("wt") == pytest.approx(0.7)
    assert report.std("wt") == pytest.approx(0.1)  # population std


def test_score_case():
    truth = np.zeros((2, 2, 2))
    truth[0, 0, 0] = 2
    pred = np.zeros((2, 2, 2))
    pred[0, 0, 0] = 2
    scores = score_case(_labels(pred), _labels(truth))
    assert scores == {"et": 1.0, "nc": 1.0, "wt": 1.0}


def test_report_csv_round_trip(tmp_path):
    report = DiceReport(
        case_ids=("case_a", "case_b", "case_c"),
        scores={
            "et": (0.5, 0.75, 1.0),
            "nc": (1.0, 0.25, 0.5),
            "wt": (0.6, 0.8, 0.7),
        },
    )
    path = tmp_path / "report.csv"
    write_report_csv(report, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "case_id,dsc_et,dsc_nc,dsc_wt"
    assert len(lines) == 1 + 3 + 2  # header + cases + mean/std
    again = read_report_csv(path)
    assert again.case_ids == report.case_ids
    for region in ("et", "nc", "wt"):
        assert again.scores[region] == pytest.approx(report.scores[region])


def test_report_validation():
    with pytest.raises(ValueError, match="one score per case"):
        DiceReport(case_ids=("a",), scores={"et": (1.0, 0.5), "nc": (1.0, 1.0), "wt": (1.0, 1.0)})
    with pytest.raises(ValueError, match="lie in"):
        DiceReport(case_ids=("a",), scores={"et": (1.5,), "nc": (1.0,), "wt": (1.0,)})
    with pytest.raises(ValueError, match="empty"):
        evaluate(lambda case: case, [])
