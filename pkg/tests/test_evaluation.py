import numpy as np
import pytest

from crossres.evaluation import ConfusionMatrix, accumulate, iou_report


def set_oracle(pred, gt, C, ignore_id):
    """IoU from explicit pixel-index sets; None where the union is empty."""
    keep = {i for i, g in enumerate(gt.ravel()) if g != ignore_id}
    ious = []
    for c in range(C):
        P = {i for i in keep if pred.ravel()[i] == c}
        G = {i for i in keep if gt.ravel()[i] == c}
        union = P | G
        ious.append(len(P & G) / len(union) if union else None)
    defined = [v for v in ious if v is not None]
    return ious, sum(defined) / len(defined)


def test_perfect_prediction_is_diagonal():
    gt = np.array([[0, 1], [2, 3]])
    cm = accumulate(ConfusionMatrix(4), gt, gt)
    assert (cm.counts == np.diag([1, 1, 1, 1])).all()
    r = iou_report(cm)
    assert r.miou == 1.0 and (r.per_class_iou == 1.0).all()


def test_all_ignore_leaves_counts():
    cm = accumulate(ConfusionMatrix(3), np.zeros((2, 2), int), np.full((2, 2), 255), ignore_id=255)
    assert cm.total == 0


def test_hand_case():
    cm = accumulate(ConfusionMatrix(2), np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]))
    assert cm.counts.tolist() == [[1, 0], [1, 2]]
    r = iou_report(cm)
    assert r.per_class_iou[0] == pytest.approx(1 / 2)
    assert r.per_class_iou[1] == pytest.approx(2 / 3)
    assert r.miou == pytest.approx(7 / 12)


def test_absent_class_excluded():
    cm = accumulate(ConfusionMatrix(3), np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]))
    r = iou_report(cm)
    assert not r.defined[2] and np.isnan(r.per_class_iou[2])
    assert r.miou == pytest.approx(7 / 12)


def test_empty_matrix_rejected():
    with pytest.raises(ValueError, match="empty"):
        iou_report(ConfusionMatrix(4))


def test_out_of_range_names_pixel():
    with pytest.raises(ValueError, match=r"\(1, 0\)"):
        accumulate(ConfusionMatrix(2), np.array([[0, 0], [5, 1]]), np.zeros((2, 2), int))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        accumulate(ConfusionMatrix(2), np.zeros((2, 2), int), np.zeros((2, 3), int))


def test_matches_set_oracle_on_random_grids():
    rng = np.random.default_rng(0)
    for _ in range(100):
        C = int(rng.integers(2, 6))
        gt = rng.integers(0, C, size=(8, 8))
        pred = rng.integers(0, C, size=(8, 8))
        gt[rng.random((8, 8)) < 0.2] = 255
        # drop a class entirely now and then
        if rng.random() < 0.5:
            gone = rng.integers(0, C)
            pred[pred == gone] = (gone + 1) % C
            gt[gt == gone] = 255
        r = iou_report(accumulate(ConfusionMatrix(C), pred, gt, 255))
        ious, miou = set_oracle(pred, gt, C, 255)
        assert r.miou == miou
        for c in range(C):
            if ious[c] is None:
                assert not r.defined[c]
            else:
                assert r.per_class_iou[c] == ious[c]


def test_tile_additivity_and_permutation():
    rng = np.random.default_rng(1)
    a = [rng.integers(0, 4, (8, 8)) for _ in range(2)]
    b = [rng.integers(0, 4, (8, 8)) for _ in range(2)]
    ab = accumulate(accumulate(ConfusionMatrix(4), *a), *b)
    ba = accumulate(accumulate(ConfusionMatrix(4), *b), *a)
    assert (ab.counts == ba.counts).all()
    assert (ab.counts == (accumulate(ConfusionMatrix(4), *a) + accumulate(ConfusionMatrix(4), *b)).counts).all()
    perm = np.array([2, 0, 3, 1])
    p = accumulate(ConfusionMatrix(4), perm[a[0]], perm[a[1]])
    base, permuted = iou_report(accumulate(ConfusionMatrix(4), *a)), iou_report(p)
    np.testing.assert_allclose(permuted.per_class_iou[perm], base.per_class_iou)
    assert permuted.miou == pytest.approx(base.miou, abs=1e-15)


def test_csv_and_summary():
    cm = accumulate(ConfusionMatrix(3), np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]))
    text = iou_report(cm).to_csv(["a", "b", "c"])
    assert text.splitlines() == ["class,iou,support", "a,0.500000,1", "b,0.666667,3", "c,undefined,0"]
    assert iou_report(cm).summary().startswith("miou=0.583333")
