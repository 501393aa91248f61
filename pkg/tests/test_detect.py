import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spacepose.detect import (
    STAGES,
    Anchor,
    BoundingBox,
    DecodedStage,
    GridPrediction,
    allocate_anchors,
    assign_targets,
    bce_with_logits,
    decode,
    decode_stage,
    detection_loss,
    encode,
    giou,
    giou_loss,
    iou,
    kmeans_anchors,
    kmeans_anchors_detailed,
    load_anchors,
    read_prediction_tensor,
    save_anchors,
    select_best,
    shape_iou,
    write_prediction_tensor,
)
from spacepose.errors import ConfigurationError, InvalidInputError, ShapeError

ANCHORS = [Anchor(w, h) for w, h in [(10, 13), (16, 30), (33, 23), (30, 61), (62, 45), (59, 119), (116, 90), (156, 198), (373, 326)]]
IMG = (416, 416)

coord = st.floats(-50, 50, allow_nan=False)
size = st.floats(0.5, 40, allow_nan=False)
boxes = st.builds(BoundingBox, coord, coord, size, size)


def random_box(rng):
    return BoundingBox(*rng.uniform(-20, 20, 2), *rng.uniform(1, 30, 2))


def fd_gradient(f, v, h=1e-5):
    g = np.zeros(4)
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        g[i] = (f(v + e) - f(v - e)) / (2 * h)
    return g


def near_tie(a, b, tol):
    ca, cb = np.array(a.corners), np.array(b.corners)
    # compare x with x and y with y edges; a near tie makes min/max non-smooth
    xa, xb = ca[[0, 2]], cb[[0, 2]]
    ya, yb = ca[[1, 3]], cb[[1, 3]]
    return np.min(np.abs(xa[:, None] - xb[None])) < tol or np.min(np.abs(ya[:, None] - yb[None])) < tol


# IoU / GIoU


def test_iou_examples():
    u = BoundingBox(0.5, 0.5, 1, 1)
    assert iou(u, u) == 1
    assert iou(u, BoundingBox(1.0, 0.5, 1, 1)) == pytest.approx(1 / 3)
    assert iou(u, BoundingBox(5, 5, 1, 1)) == 0
    z = BoundingBox(0, 0, 0, 0)
    assert iou(z, z) == 0


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert 0 <= v <= 1
    assert v == pytest.approx(iou(b, a))


@given(boxes, boxes)
def test_giou_not_above_iou(a, b):
    assert giou(a, b) <= iou(a, b) + 1e-12
    loss, _ = giou_loss(a, b)
    assert 0 <= loss < 2


@given(boxes, st.floats(0.1, 0.9), st.floats(0.1, 0.9))
def test_giou_equals_iou_when_nested(outer, fw, fh):
    inner = BoundingBox(outer.x, outer.y, outer.w * fw, outer.h * fh)
    assert giou(inner, outer) == pytest.approx(iou(inner, outer), abs=1e-12)


def test_giou_identical_zero():
    b = BoundingBox(3, 4, 5, 6)
    loss, grad = giou_loss(b, b)
    assert loss == 0
    np.testing.assert_array_equal(grad, 0)


def test_giou_far_limit():
    t = BoundingBox(0, 0, 2, 2)
    losses = [giou_loss(BoundingBox(d, d, 2, 2), t)[0] for d in (10, 100, 1e4, 1e6)]
    assert np.all(np.diff(losses) > 0)
    assert losses[-1] == pytest.approx(2, abs=1e-5)


def test_giou_rejects_empty_truth():
    with pytest.raises(InvalidInputError):
        giou_loss(BoundingBox(0, 0, 1, 1), BoundingBox(0, 0, 0, 1))


def test_giou_gradient_matches_finite_differences():
    rng = np.random.default_rng(30)
    checked = 0
    while checked < 1000:
        p, t = random_box(rng), random_box(rng)
        if near_tie(p, t, 1e-3):
            continue
        _, g = giou_loss(p, t)
        fd = fd_gradient(lambda v: giou_loss(BoundingBox(*v), t)[0], p.as_array())
        assert np.all(np.abs(g - fd) <= 1e-4 * np.maximum(np.abs(fd), 1e-3))
        checked += 1


# decode / encode


def zero_pred(N):
    return GridPrediction(np.zeros((N, N, 3, 5)))


def test_zero_logits_cell_center_anchor_size():
    N = 13
    d = decode_stage(zero_pred(N), ANCHORS[6:], IMG)
    stride = IMG[0] / N
    assert np.all(d.objectness == 0.5)
    np.testing.assert_allclose(d.boxes[0, 0, :, 0], 0.5 * stride)
    np.testing.assert_allclose(d.boxes[0, 0, :, 1], 0.5 * stride)
    np.testing.assert_allclose(d.boxes[2, 5, 1, :2], [(5 + 0.5) * stride, (2 + 0.5) * stride])
    np.testing.assert_allclose(d.boxes[..., 2], np.broadcast_to([a.p_w for a in ANCHORS[6:]], (N, N, 3)))


def test_log_two_doubles_width():
    t = np.zeros((13, 13, 3, 5))
    t[..., 3] = math.log(2)
    d = decode_stage(GridPrediction(t), ANCHORS[6:], IMG)
    assert d.boxes[0, 0, 0, 2] == pytest.approx(2 * ANCHORS[6].p_w)


def test_decode_list_order():
    dets = decode(zero_pred(2), ANCHORS[:3], (64, 64))
    assert [d.key()[1:] for d in dets] == list(itertools.product(range(2), range(2), range(3)))


def test_anchor_count_mismatch():
    with pytest.raises(ConfigurationError):
        decode_stage(zero_pred(13), ANCHORS[:2], IMG)


def test_grid_shape_checked():
    with pytest.raises(ShapeError):
        GridPrediction(np.zeros((13, 13, 2, 5)))
    with pytest.raises(InvalidInputError):
        GridPrediction(np.full((1, 1, 3, 5), np.nan))


def test_decode_encode_round_trip():
    rng = np.random.default_rng(31)
    for N, idx in zip(STAGES, allocate_anchors(ANCHORS)):
        anchors = [ANCHORS[i] for i in idx]
        t = rng.normal(0, 2, (N, N, 3, 5))
        d = decode_stage(GridPrediction(t), anchors, IMG)
        for _ in range(200):
            r, c, a = rng.integers(N), rng.integers(N), rng.integers(3)
            det = d.detection(r, c, a)
            row, col, back = encode(det.box, anchors[a], N, IMG, det.objectness)
            assert (row, col) == (r, c)
            np.testing.assert_allclose(back, t[r, c, a], atol=1e-9)


def test_encode_rejects_cell_boundary():
    with pytest.raises(InvalidInputError):
        encode(BoundingBox(32.0, 40.0, 10, 10), ANCHORS[0], 13, IMG)


# select_best


def stages_from(tensors, anchor_sets=None):
    anchor_sets = anchor_sets or [ANCHORS[i * 3 : i * 3 + 3] for i in range(len(tensors))]
    return [decode_stage(GridPrediction(t), a, IMG, s) for s, (t, a) in enumerate(zip(tensors, anchor_sets))]


def test_select_single_boost():
    ts = [np.zeros((n, n, 3, 5)) for n in STAGES]
    ts[1][7, 3, 2, 0] = 5.0
    best = select_best(stages_from(ts))
    assert best.key() == (1, 7, 3, 2)


def test_select_tie_first():
    ts = [np.zeros((n, n, 3, 5)) for n in STAGES]
    ts[2][1, 1, 0, 0] = 3.0
    ts[1][9, 9, 2, 0] = 3.0
    ts[1][4, 6, 1, 0] = 3.0
    assert select_best(stages_from(ts)).key() == (1, 4, 6, 1)


def test_select_matches_exhaustive_scan():
    rng = np.random.default_rng(32)
    for _ in range(5):
        ts = [rng.normal(size=(n, n, 3, 5)) for n in STAGES]
        stages = stages_from(ts)
        best = None
        for st_ in stages:
            for det in st_:
                if best is None or det.objectness > best.objectness:
                    best = det
        got = select_best(stages)
        assert got.key() == best.key()
        assert got.box == best.box


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10), st.floats(-5, 5))
def test_select_invariant_to_monotone_transform(seed, scale, shift):
    rng = np.random.default_rng(seed)
    ts = [rng.normal(size=(n, n, 3, 5)) for n in (4, 8)]
    moved = [t.copy() for t in ts]
    for t in moved:
        t[..., 0] = np.tanh(t[..., 0]) * scale + shift
    a = select_best(stages_from(ts, [ANCHORS[:3], ANCHORS[3:6]]))
    b = select_best(stages_from(moved, [ANCHORS[:3], ANCHORS[3:6]]))
    assert a.key() == b.key()


def test_select_empty():
    with pytest.raises(InvalidInputError):
        select_best([])


# targets and loss


def test_allocation_largest_to_coarsest():
    alloc = allocate_anchors(ANCHORS)
    assert alloc == [[6, 7, 8], [3, 4, 5], [0, 1, 2]]


def test_assign_exact_anchor_shape():
    a = assign_targets(BoundingBox(200, 100, ANCHORS[5].p_w, ANCHORS[5].p_h), ANCHORS, IMG)
    assert a.anchor_index == 5
    assert a.stage == 1
    stride = IMG[0] / 26
    assert (a.row, a.col) == (int(100 // stride), int(200 // stride))
    assert a.targets[1][a.row, a.col, a.slot] == 1


def test_assign_matches_brute_force():
    rng = np.random.default_rng(33)
    for _ in range(200):
        b = BoundingBox(*rng.uniform(0, 415, 2), *rng.uniform(5, 400, 2))
        a = assign_targets(b, ANCHORS, IMG)
        scores = [shape_iou(b.w, b.h, x.p_w, x.p_h) for x in ANCHORS]
        assert scores[a.anchor_index] == max(scores)
        assert sum(t.sum() for t in a.targets) == 1
        assert all(set(np.unique(t)) <= {0.0, 1.0} for t in a.targets)


def test_assign_center_outside():
    with pytest.raises(InvalidInputError):
        assign_targets(BoundingBox(-1, 10, 5, 5), ANCHORS, IMG)


def test_bce_matches_direct_formula():
    x = np.linspace(-8, 8, 33)
    p = 1 / (1 + np.exp(-x))
    for y in (0.0, 1.0):
        np.testing.assert_allclose(bce_with_logits(x, y), -(y * np.log(p) + (1 - y) * np.log(1 - p)), rtol=1e-10)
    assert np.isfinite(bce_with_logits(1e4, 0.0))


def test_zero_logits_closed_form():
    truth = BoundingBox(200, 210, 50, 40)
    preds = [zero_pred(n) for n in STAGES]
    loss = detection_loss(preds, truth, ANCHORS, IMG, lambda_giou=0.0)
    n_cells = sum(3 * n * n for n in STAGES)
    assert loss.conf == pytest.approx(n_cells * math.log(2))
    assert loss.total == pytest.approx(loss.conf)


def test_conf_only_matches_standalone_bce():
    rng = np.random.default_rng(34)
    truth = BoundingBox(100, 300, 80, 60)
    preds = [GridPrediction(rng.normal(size=(n, n, 3, 5))) for n in STAGES]
    tgt = assign_targets(truth, ANCHORS, IMG)
    oracle = 0.0
    for p, t in zip(preds, tgt.targets):
        pr = 1 / (1 + np.exp(-p.logits[..., 0]))
        oracle += float(np.sum(-(t * np.log(pr) + (1 - t) * np.log(1 - pr))))
    loss = detection_loss(preds, truth, ANCHORS, IMG, lambda_giou=0.0)
    assert loss.total == pytest.approx(oracle, rel=1e-10)


def perfect_prediction(truth, sat):
    tgt = assign_targets(truth, ANCHORS, IMG)
    ts = [np.full((n, n, 3, 5), 0.0) for n in STAGES]
    for t in ts:
        t[..., 0] = -sat
    N = STAGES[tgt.stage]
    row, col, logits = encode(truth, ANCHORS[tgt.anchor_index], N, IMG)
    ts[tgt.stage][row, col, tgt.slot, 1:] = logits[1:]
    ts[tgt.stage][row, col, tgt.slot, 0] = sat
    return [GridPrediction(t) for t in ts]


def test_perfect_prediction_saturates():
    truth = BoundingBox(201.3, 150.7, 90.0, 70.0)
    losses = [detection_loss(perfect_prediction(truth, s), truth, ANCHORS, IMG) for s in (2, 5, 10, 20, 30)]
    assert all(l.giou == pytest.approx(0, abs=1e-12) for l in losses)
    totals = [l.total for l in losses]
    assert np.all(np.diff(totals) < 0)
    assert totals[-1] < 1e-8


def test_loss_weights():
    truth = BoundingBox(201.3, 150.7, 90.0, 70.0)
    preds = [zero_pred(n) for n in STAGES]
    a = detection_loss(preds, truth, ANCHORS, IMG)
    b = detection_loss(preds, truth, ANCHORS, IMG, lambda_giou=2.0, lambda_conf=0.5)
    assert b.total == pytest.approx(2 * a.giou + 0.5 * a.conf)
    with pytest.raises(ConfigurationError):
        detection_loss(preds, truth, ANCHORS, IMG, lambda_giou=-1)


# k-means


def test_kmeans_recovers_distinct_sizes():
    rng = np.random.default_rng(35)
    sizes = [(w, h) for w, h in [(10, 12), (20, 45), (35, 20), (60, 60), (90, 40), (40, 110), (150, 120), (220, 260), (380, 300)]]
    boxes = [BoundingBox(0, 0, *sizes[i]) for i in rng.integers(0, 9, 400)]
    boxes += [BoundingBox(0, 0, *s) for s in sizes]
    found = kmeans_anchors(boxes, k=9, seed=1)
    assert sorted((a.p_w, a.p_h) for a in found) == sorted(sizes)


def test_kmeans_single_cluster_against_grid_search():
    rng = np.random.default_rng(36)
    wh = np.exp(rng.normal([4.0, 3.5], [0.3, 0.4], (200, 2)))
    res = kmeans_anchors_detailed([BoundingBox(0, 0, *x) for x in wh], k=1, seed=0)
    a = res.anchors[0]
    # the update rule is the member mean of (w, h)
    np.testing.assert_allclose([a.p_w, a.p_h], wh.mean(axis=0), rtol=1e-12)

    def cost(w, h):
        return sum(1 - shape_iou(x[0], x[1], w, h) for x in wh)

    grid = min(cost(w, h) for w in np.linspace(*np.percentile(wh[:, 0], [5, 95]), 60)
               for h in np.linspace(*np.percentile(wh[:, 1], [5, 95]), 60))
    # the mean is not the exact 1 - IoU minimizer; it lands close to it
    assert cost(a.p_w, a.p_h) <= 1.03 * grid


def test_kmeans_history_monotone_and_deterministic():
    rng = np.random.default_rng(37)
    boxes = [BoundingBox(0, 0, *x) for x in np.exp(rng.normal(3.5, 0.8, (300, 2)))]
    r1 = kmeans_anchors_detailed(boxes, k=9, seed=5)
    r2 = kmeans_anchors_detailed(boxes, k=9, seed=5)
    assert np.all(np.diff(r1.history) <= 1e-12)
    assert r1.converged
    assert [(a.p_w, a.p_h) for a in r1.anchors] == [(a.p_w, a.p_h) for a in r2.anchors]
    areas = [a.area for a in r1.anchors]
    assert areas == sorted(areas)


def test_kmeans_too_few_boxes():
    with pytest.raises(InvalidInputError):
        kmeans_anchors([BoundingBox(0, 0, 1, 1)] * 3, k=9)


# files


def test_anchor_file_round_trip(tmp_path):
    save_anchors(tmp_path / "a.json", ANCHORS)
    assert load_anchors(tmp_path / "a.json") == ANCHORS


def test_prediction_tensor_layout(tmp_path):
    rng = np.random.default_rng(38)
    preds = [GridPrediction(rng.normal(size=(n, n, 3, 5))) for n in (2, 4)]
    write_prediction_tensor(tmp_path / "t.bin", tmp_path / "t.json", preds, dtype="float64")
    raw = np.fromfile(tmp_path / "t.bin", dtype="<f8")
    np.testing.assert_array_equal(raw, np.concatenate([p.logits.ravel() for p in preds]))
    back = read_prediction_tensor(tmp_path / "t.bin", tmp_path / "t.json")
    for a, b in zip(preds, back):
        np.testing.assert_array_equal(a.logits, b.logits)
