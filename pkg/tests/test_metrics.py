import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnseg.data import ISPRS_PALETTE, LabelMap
from attnseg.metrics import ConfusionMatrix, accumulate, compute_report, confusion_matrix, format_csv, format_table
from attnseg.tensor import ContractError
from oracles import metric_oracle


def cm_of(rows):
    rows = np.array(rows, dtype=np.uint64)
    return ConfusionMatrix(len(rows), rows)


EXAMPLE = [[3, 1], [2, 4]]


def test_perfect_prediction_is_diagonal():
    gt = np.random.default_rng(0).integers(0, 4, (6, 6))
    cm = accumulate(ConfusionMatrix(4), gt, gt)
    assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0
    rep = compute_report(cm)
    assert all(v == (1.0, 1.0) for v in rep.per_class)
    assert rep.oa == rep.miou == rep.af == 1.0


def test_accumulation_is_additive():
    rng = np.random.default_rng(1)
    a_p, a_g, b_p, b_g = (rng.integers(0, 3, (5, 7)) for _ in range(4))
    sep = accumulate(accumulate(ConfusionMatrix(3), a_p, a_g), b_p, b_g)
    joint = accumulate(ConfusionMatrix(3), np.hstack([a_p, b_p]), np.hstack([a_g, b_g]))
    assert sep == joint
    assert accumulate(ConfusionMatrix(3), a_p, a_g) + accumulate(ConfusionMatrix(3), b_p, b_g) == joint
    assert confusion_matrix([(a_p, a_g), (b_p, b_g)], 3) == joint


@pytest.mark.parametrize("seed", range(5))
def test_counts_match_pixel_loop(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.integers(0, 5, (2, 8, 8))
    expected = np.zeros((5, 5), np.uint64)
    for i in range(8):
        for j in range(8):
            expected[gt[i, j], pred[i, j]] += 1
    cm = accumulate(ConfusionMatrix(5), LabelMap(pred, ISPRS_PALETTE), LabelMap(gt, ISPRS_PALETTE))
    assert np.array_equal(cm.counts, expected)
    assert cm.counts.dtype == np.uint64
    assert cm.total == 64


def test_out_of_range_label_reports_location():
    gt = np.zeros((3, 3), int)
    pred = gt.copy()
    pred[2, 1] = 7
    with pytest.raises(ContractError, match=r"\(2, 1\)"):
        accumulate(ConfusionMatrix(3), pred, gt)
    with pytest.raises(ContractError):
        accumulate(ConfusionMatrix(3), pred[:2], gt)
    with pytest.raises(ContractError):
        ConfusionMatrix(2) + ConfusionMatrix(3)


def test_two_class_hand_example():
    rep = compute_report(cm_of(EXAMPLE))
    (iou0, f10), (iou1, f11) = rep.per_class
    assert iou0 == pytest.approx(3 / 6, abs=1e-12)
    assert f10 == pytest.approx(6 / 9, abs=1e-12)
    assert iou1 == pytest.approx(4 / 7, abs=1e-12)
    assert f11 == pytest.approx(8 / 11, abs=1e-12)
    assert rep.oa == pytest.approx(0.7, abs=1e-12)
    assert rep.miou == pytest.approx((0.5 + 4 / 7) / 2, abs=1e-12)


def test_hand_example_against_scalar_oracle():
    # expand the matrix back into pixel pairs
    gt = np.repeat([0, 0, 1, 1], [3, 1, 2, 4])
    pred = np.repeat([0, 1, 0, 1], [3, 1, 2, 4])
    ref = metric_oracle(pred, gt, 2)
    rep = compute_report(accumulate(ConfusionMatrix(2), pred[None], gt[None]))
    assert [i for i, _ in rep.per_class] == pytest.approx(ref["iou"], abs=1e-12)
    assert rep.oa == pytest.approx(ref["oa"], abs=1e-12)


def test_exclusion_semantics():
    rep = compute_report(cm_of(EXAMPLE), excluded={1})
    assert rep.miou == pytest.approx(0.5)
    assert rep.af == pytest.approx(6 / 9)
    assert rep.oa == pytest.approx(0.7)
    assert rep.reported_classes == [0]
    only_kept = compute_report(cm_of(EXAMPLE), excluded={1}, oa_excludes=True)
    assert only_kept.oa == pytest.approx(3 / 4)


def test_report_errors():
    with pytest.raises(ContractError, match="every class"):
        compute_report(cm_of(EXAMPLE), excluded={0, 1})
    with pytest.raises(ContractError):
        compute_report(cm_of(EXAMPLE), excluded={2})
    with pytest.raises(ContractError, match="empty"):
        compute_report(ConfusionMatrix(2))


def test_zero_support_class_scores_zero_with_warning():
    cm = cm_of([[5, 0, 0], [1, 3, 0], [0, 0, 0]])
    with pytest.warns(UserWarning, match="no support"):
        rep = compute_report(cm)
    assert rep.per_class[2] == (0.0, 0.0)
    assert rep.unsupported == [2]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        compute_report(cm, excluded={2})


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31))
def test_report_matches_oracle(k, h, w, seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, k, (h, w))
    pred = np.where(rng.random((h, w)) < 0.6, gt, rng.integers(0, k, (h, w)))
    excluded = {int(rng.integers(0, k))} if k > 2 and seed % 2 else set()
    ref = metric_oracle(pred, gt, k, excluded)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = compute_report(accumulate(ConfusionMatrix(k), pred, gt), excluded)
    for c, (iou, f1) in enumerate(rep.per_class):
        assert abs(iou - ref["iou"][c]) < 1e-9 and abs(f1 - ref["f1"][c]) < 1e-9
        assert abs(f1 - 2 * iou / (1 + iou)) < 1e-12
        assert f1 >= iou
        assert 0.0 <= iou <= 1.0
    for key in ("miou", "af", "oa"):
        assert abs(getattr(rep, key) - ref[key]) < 1e-9


def test_table_cells():
    rep = compute_report(cm_of(EXAMPLE))
    perfect = compute_report(cm_of([[4, 0], [0, 6]]))
    table = format_table([("example", rep), ("perfect", perfect)])
    lines = table.splitlines()
    assert lines[0].split()[:5] == ["Model", "class", "0", "class", "1"]
    assert lines[2].split()[1] == "50.00/66.67"
    assert lines[2].split()[-1] == "70.00"
    assert lines[3].split()[1:] == ["100.00/100.00"] * 2 + ["100.00"] * 3


def test_table_uses_class_names_and_exclusion():
    rep = compute_report(cm_of(EXAMPLE), excluded={1}, class_names=["road", "house"])
    header = format_table([("m", rep)]).splitlines()[0]
    assert "road" in header and "house" not in header


def test_empty_table_is_header_only():
    assert format_table([]).splitlines()[0].split() == ["Model", "MIoU", "(%)", "AF", "(%)", "OA", "(%)"]
    assert len(format_table([]).splitlines()) == 2
    assert format_csv([]) == "Model,MIoU (%),AF (%),OA (%)\n"


def test_inconsistent_class_sets_rejected():
    a = compute_report(cm_of(EXAMPLE))
    b = compute_report(cm_of(EXAMPLE), excluded={1})
    with pytest.raises(ContractError):
        format_table([("a", a), ("b", b)])


def test_csv_layout():
    out = format_csv([("example", compute_report(cm_of(EXAMPLE)))]).splitlines()
    assert out == ["Model,class 0,class 1,MIoU (%),AF (%),OA (%)", "example,50.00/66.67,57.14/72.73,53.57,69.70,70.00"]
