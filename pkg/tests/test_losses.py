import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from oracles import box_iou, siou
from repdet.assign import tal_assign
from repdet.losses import (CLS_KINDS, IOU_KINDS, DistillConfig, LossWeights, Prediction,
                           categorical_kl, cls_loss, cls_loss_logits, cosine_alpha,
                           degenerate_boxes, detection_loss, dfl_expectation, dfl_loss, iou_loss,
                           kd_loss, object_loss, total_loss)
from repdet.sandbox import SandboxConfig, initial_prediction, random_instance, single_gt_instance

probs = st.floats(1e-4, 1 - 1e-4)
unit = st.floats(0.0, 1.0)


# ---------------------------------------------------------------- classification
def test_focal_reference_value():
    loss, _ = cls_loss("focal", 0.5, 1.0)
    assert loss == pytest.approx(0.25 * 0.25 * math.log(2), rel=1e-12)
    assert float(loss) == pytest.approx(0.043322, abs=1e-6)


@given(st.floats(0.05, 0.95))
def test_vfl_minimum_at_target(q):
    expected = -q * (q * math.log(q) + (1 - q) * math.log(1 - q))
    at_q, _ = cls_loss("vfl", q, q)
    assert at_q == pytest.approx(expected, rel=1e-9)
    for p in (q * 0.9, min(q * 1.1, 0.999), q - 0.01, q + 0.01):
        assert cls_loss("vfl", p, q)[0] >= at_q - 1e-12


@given(probs)
def test_qfl_zero_when_matched(p):
    assert cls_loss("qfl", p, p)[0] == pytest.approx(0.0, abs=1e-12)


@given(st.sampled_from(CLS_KINDS), probs, unit)
def test_cls_losses_nonnegative(kind, p, q):
    assert cls_loss(kind, p, q)[0] >= 0


@given(st.sampled_from(CLS_KINDS), st.floats(-8, 8), unit)
def test_cls_gradient_matches_fd(kind, z, q):
    h = 1e-5
    _, g = cls_loss_logits(kind, np.array([z]), np.array([q]))
    lp, _ = cls_loss_logits(kind, np.array([z + h]), np.array([q]))
    lm, _ = cls_loss_logits(kind, np.array([z - h]), np.array([q]))
    fd = (lp[0] - lm[0]) / (2 * h)
    assert abs(g[0] - fd) <= 1e-6 + 1e-4 * abs(fd)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_cls_rejects_closed_interval(p):
    with pytest.raises(ValueError):
        cls_loss("focal", p, 1.0)


def test_unknown_cls_kind():
    with pytest.raises(ValueError):
        cls_loss("hinge", 0.5, 1.0)


# ------------------------------------------------------------------------- IoU
boxes = st.tuples(st.floats(-4, 4), st.floats(-4, 4), st.floats(0.2, 5), st.floats(0.2, 5)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@given(st.sampled_from(IOU_KINDS), boxes)
def test_iou_losses_zero_at_gt(kind, b):
    loss, _ = iou_loss(kind, b, b)
    assert loss[0] == 0.0


@given(st.sampled_from(IOU_KINDS), boxes, boxes)
def test_iou_losses_nonnegative_and_bounded_below_by_one_minus_iou(kind, p, g):
    loss, _ = iou_loss(kind, p, g)
    assert loss[0] >= 1 - box_iou(p, g) - 1e-12


def test_giou_disjoint_reference():
    loss, _ = iou_loss("giou", (0, 0, 1, 1), (1, 1, 2, 2))
    assert loss[0] == pytest.approx(1.5, abs=1e-12)


@given(boxes, st.floats(0.05, 0.45), st.floats(0.05, 0.45))
def test_giou_nested_penalty_vanishes(g, fx, fy):
    w, h = g[2] - g[0], g[3] - g[1]
    inner = (g[0] + fx * w, g[1] + fy * h, g[2] - fx * w, g[3] - fy * h)
    loss, _ = iou_loss("giou", inner, g)
    assert loss[0] == pytest.approx(1 - box_iou(inner, g), abs=1e-12)


SIOU_TABLE = [
    ((0, 0, 2, 2), (1, 1, 3, 4), 1.0187717241931245, 0.9657257891008235),
    ((0, 0, 4, 2), (3, 0, 5, 6), 1.0554099968292767, 1.0554099968292767),
    ((1, 1, 2, 3), (0, 0, 4, 4), 0.9411201681957981, 0.9224902473722306),
    ((0, 0, 1, 1), (5, 2, 6, 4), 1.481793216354672, 1.191489562097539),
    ((2, 3, 5, 5), (0, 0, 3, 3), 1.1917827844402522, 1.1503246579359419),
]


@pytest.mark.parametrize("pred,gt,sin2,sin1", SIOU_TABLE)
def test_siou_reference_table(pred, gt, sin2, sin1):
    assert iou_loss("siou", pred, gt)[0][0] == pytest.approx(sin2, abs=1e-12)
    assert iou_loss("siou", pred, gt, angle_form="sin")[0][0] == pytest.approx(sin1, abs=1e-12)


@given(boxes, boxes, st.sampled_from(["sin2", "sin"]))
def test_siou_matches_trig_oracle(p, g, form):
    cx = (p[0] + p[2] - g[0] - g[2]) / 2
    cy = (p[1] + p[3] - g[1] - g[3]) / 2
    assume(math.hypot(cx, cy) > 1e-6)
    assert iou_loss("siou", p, g, angle_form=form)[0][0] == pytest.approx(
        siou(p, g, angle_form=form), abs=1e-10)


def test_siou_bad_form():
    with pytest.raises(ValueError):
        iou_loss("siou", (0, 0, 1, 1), (0, 0, 2, 2), angle_form="cos")


@given(st.sampled_from(IOU_KINDS), boxes, boxes)
def test_iou_gradient_matches_fd(kind, p, g):
    p = np.array(p)
    h = 1e-6
    _, grad = iou_loss(kind, p, g)
    for j in range(4):
        # keep every corner clear of the other box's edges: the loss has kinks there
        assume(all(abs(p[j] - g[k]) > 1e-3 for k in (j % 2, j % 2 + 2)))
        assume(abs(p[j] - p[(j + 2) % 4]) > 1e-3)
        e = np.zeros(4)
        e[j] = h
        fd = (iou_loss(kind, p + e, g)[0][0] - iou_loss(kind, p - e, g)[0][0]) / (2 * h)
        assert abs(grad[0, j] - fd) <= 1e-5 + 1e-4 * abs(fd)


def test_degenerate_pred_is_finite_and_flagged():
    pred = np.array([[1.0, 1.0, 1.0, 3.0], [0, 0, 1, 1]])
    gt = np.array([[0.0, 0.0, 2.0, 2.0]] * 2)
    for kind in IOU_KINDS:
        loss, grad = iou_loss(kind, pred, gt)
        assert np.all(np.isfinite(loss)) and np.all(np.isfinite(grad))
    assert degenerate_boxes(pred).tolist() == [True, False]


def test_zero_size_gt_rejected():
    with pytest.raises(ValueError):
        iou_loss("giou", (0, 0, 1, 1), (0, 0, 0, 1))


# ------------------------------------------------------------------------- DFL
def test_dfl_uniform_reference():
    loss, _ = dfl_loss(np.zeros(17), 2.5)
    assert loss == pytest.approx(math.log(17), abs=1e-12)


def test_dfl_integer_target_is_cross_entropy():
    z = np.random.default_rng(0).normal(size=17)
    loss, _ = dfl_loss(z, 4.0)
    assert loss == pytest.approx(-(z[4] - np.log(np.exp(z).sum())), abs=1e-12)
    z = np.full(17, -30.0)
    z[7] = 30.0
    assert dfl_loss(z, 7.0)[0] < 1e-12
    assert dfl_loss(np.zeros(17), 16.0)[0] == pytest.approx(math.log(17))


def test_dfl_range():
    with pytest.raises(ValueError):
        dfl_loss(np.zeros(17), 16.5)
    with pytest.raises(ValueError):
        dfl_loss(np.zeros(1), 0.0)


@given(st.floats(0, 16))
def test_dfl_gradient_matches_fd(y):
    z = np.random.default_rng(int(y * 100)).normal(size=17)
    _, g = dfl_loss(z, y)
    h = 1e-5
    for i in range(17):
        e = np.zeros(17)
        e[i] = h
        fd = (dfl_loss(z + e, y)[0] - dfl_loss(z - e, y)[0]) / (2 * h)
        assert abs(g[i] - fd) <= 1e-7 + 1e-4 * abs(fd)


def test_dfl_expectation_values():
    one_hot = np.full(17, -50.0)
    one_hot[7] = 50.0
    assert dfl_expectation(one_hot) == pytest.approx(7.0, abs=1e-12)
    assert dfl_expectation(np.zeros(17)) == pytest.approx(8.0, abs=1e-12)
    two = np.full(17, -50.0)
    two[[0, 16]] = 0.0
    assert dfl_expectation(two) == pytest.approx(8.0, abs=1e-12)


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=20))
def test_dfl_expectation_in_range(z):
    e = dfl_expectation(np.array(z))
    assert -1e-12 <= e <= len(z) - 1 + 1e-12


def test_dfl_fit_recovers_target():
    z = np.zeros(17)
    for _ in range(10000):
        z -= 2.0 * dfl_loss(z, 5.3)[1]
    assert abs(dfl_expectation(z) - 5.3) <= 1e-3


# ---------------------------------------------------------------------- object
def test_object_loss_values():
    assert object_loss(0.0, 1.0)[0] == pytest.approx(math.log(2))
    assert object_loss(50.0, 1.0)[0] < 1e-20
    assert object_loss(-50.0, 0.0)[0] < 1e-20


@given(st.floats(-10, 10), unit)
def test_object_gradient_matches_fd(z, t):
    h = 1e-5
    fd = (object_loss(z + h, t)[0] - object_loss(z - h, t)[0]) / (2 * h)
    assert abs(object_loss(z, t)[1] - fd) <= 1e-8 + 1e-4 * abs(fd)


# ---------------------------------------------------------------- detection
def _instance(seed=0, reg_max=16, classes=2, with_obj=False):
    anchors, gts = random_instance(8, 8, 2, classes, seed)
    cfg = SandboxConfig(num_classes=classes, reg_max=reg_max)
    r = np.random.default_rng(seed)
    p0 = initial_prediction(anchors, cfg, with_obj)
    pred = Prediction(r.normal(0, 1, p0.cls_logits.shape), p0.reg + r.normal(0, 0.5, p0.reg.shape),
                      anchors, None if p0.obj_logits is None else r.normal(size=p0.obj_logits.shape))
    a = tal_assign(anchors, gts, pred.cls_probs, pred.boxes())
    return pred, a


def _with(pred, **kw):
    d = dict(cls_logits=pred.cls_logits, reg=pred.reg, anchors=pred.anchors, obj_logits=pred.obj_logits)
    d.update(kw)
    return Prediction(**d)


def _fd_check(f, pred, name, key, rows, r, h=1e-6, n=6):
    ref = f(pred)
    arr = getattr(pred, name)
    for _ in range(n):
        row = int(r.choice(rows)) if r.random() < 0.7 else int(r.integers(arr.shape[0]))
        idx = (row,) + tuple(int(r.integers(s)) for s in arr.shape[1:])
        plus, minus = arr.copy(), arr.copy()
        plus[idx] += h
        minus[idx] -= h
        fd = (f(_with(pred, **{name: plus})).total - f(_with(pred, **{name: minus})).total) / (2 * h)
        assert abs(ref.grads[key][idx] - fd) <= 1e-6 + 1e-4 * abs(fd), (name, idx)


@pytest.mark.parametrize("reg_max,reg_kind", [(16, "giou"), (16, "siou"), (0, "ciou"), (0, "diou")])
def test_detection_loss_gradient_matches_fd(reg_max, reg_kind):
    # classification and objectness targets are detached, so hold them fixed
    pred, a = _instance(1, reg_max, with_obj=True)
    assert a.num_pos > 0
    w = LossWeights(2.5, 0.7)
    q = np.zeros_like(pred.cls_logits)
    q[a.positives, a.assigned_class[a.positives]] = 0.6
    r = np.random.default_rng(0)
    rows = np.flatnonzero(a.positives)

    def f(p):
        return detection_loss(p, a, w, reg_kind=reg_kind, cls_targets=q)

    _fd_check(f, pred, "cls_logits", "cls", rows, r)
    _fd_check(f, pred, "reg", "reg", rows, r, n=12)
    _fd_check(lambda p: detection_loss(p, a, w, reg_kind=reg_kind, use_obj=True, cls_targets=q),
              pred, "obj_logits", "obj", rows, r)


def test_object_term_is_a_pure_switch():
    pred, a = _instance(2, with_obj=True)
    off = detection_loss(pred, a, LossWeights(2.5, 0.0), use_obj=True)
    on = detection_loss(pred, a, LossWeights(2.5, 1.3), use_obj=True)
    assert on.total - off.total == pytest.approx(1.3 * on.obj, rel=1e-12)
    assert detection_loss(pred, a, LossWeights(2.5, 1.3)).total == pytest.approx(off.total)
    with pytest.raises(ValueError):
        detection_loss(_with(pred, obj_logits=None), a, use_obj=True)


def test_lambda_linearity():
    pred, a = _instance(3)
    one = detection_loss(pred, a, LossWeights(1.0))
    two = detection_loss(pred, a, LossWeights(2.0))
    assert two.total - one.total == pytest.approx(one.reg, rel=1e-12)
    assert one.reg > 0


def test_zero_gt_background_fit_is_near_zero():
    anchors, _ = single_gt_instance()
    from repdet.assign import stack_gts
    a = tal_assign(anchors, stack_gts([]), np.full((len(anchors), 1), 0.5), np.zeros((len(anchors), 4)))
    cfg = SandboxConfig()
    p = initial_prediction(anchors, cfg)
    res = detection_loss(_with(p, cls_logits=np.full_like(p.cls_logits, -30.0)), a)
    assert res.reg == 0 and res.total < 1e-9
    assert np.all(res.grads["reg"] == 0)


def test_dfl_requested_without_bins():
    pred, a = _instance(4, reg_max=0)
    with pytest.raises(ValueError):
        detection_loss(pred, a, use_dfl=True)


# ---------------------------------------------------------------- distillation
def test_kd_zero_when_identical():
    pred, _ = _instance(5)
    kd = kd_loss(pred, pred, 2.0)
    assert kd.total == 0.0


def test_kd_uniform_teacher_one_hot_student():
    zt = np.zeros(17)
    zs = np.full(17, -1e4)
    zs[3] = 0.0
    kl, _ = categorical_kl(zt, zs)
    ss = np.full(17, 1e-9)
    ss[3] = 1.0
    ss /= ss.sum()
    expected = float(np.sum(1 / 17 * np.log((1 / 17) / ss)))
    assert np.isfinite(kl) and kl == pytest.approx(expected, rel=1e-12)
    assert kl > 16 / 17 * -math.log(1e-9) - 3


@given(st.integers(0, 50), st.floats(0.5, 4))
def test_kd_nonnegative(seed, temp):
    s, _ = _instance(seed % 7)
    t = _with(s, cls_logits=s.cls_logits + np.random.default_rng(seed).normal(size=s.cls_logits.shape),
              reg=s.reg * 1.5)
    assert kd_loss(s, t, temp).total >= 0


def test_kd_gradient_matches_fd():
    s, _ = _instance(6)
    r = np.random.default_rng(1)
    t = _with(s, cls_logits=r.normal(size=s.cls_logits.shape), reg=r.normal(size=s.reg.shape))
    for temp in (1.0, 2.5):
        ref = kd_loss(s, t, temp)
        h = 1e-6
        for name, key in (("cls_logits", "cls"), ("reg", "reg")):
            arr = getattr(s, name)
            for _ in range(8):
                idx = tuple(int(r.integers(n)) for n in arr.shape)
                plus, minus = arr.copy(), arr.copy()
                plus[idx] += h
                minus[idx] -= h
                fd = (kd_loss(_with(s, **{name: plus}), t, temp).total
                      - kd_loss(_with(s, **{name: minus}), t, temp).total) / (2 * h)
                assert abs(ref.grads[key][idx] - fd) <= 1e-8 + 1e-4 * abs(fd)


def test_kd_requires_dfl():
    s, _ = _instance(0, reg_max=0)
    with pytest.raises(ValueError, match="DFL"):
        kd_loss(s, s)
    assert kd_loss(s, s, with_reg=False).reg == 0


def test_cosine_alpha_schedule():
    cfg = DistillConfig(1.0, 0.2, 100)
    assert cosine_alpha(0, cfg) == pytest.approx(1.0)
    assert cosine_alpha(100, cfg) == pytest.approx(0.2)
    assert cosine_alpha(50, cfg) == pytest.approx(0.6)
    vals = [cosine_alpha(s, cfg) for s in range(101)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        cosine_alpha(101, cfg)
    with pytest.raises(ValueError):
        DistillConfig(total_steps=0)


def test_total_loss():
    assert total_loss(1.0, 2.0, 0.5) == 2.0
    assert total_loss(1.5, 3.0, 0.0) == 1.5
    assert total_loss(1.5, 0.0, 0.7) == 1.5
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, -0.1)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(-1.0)
    with pytest.raises(ValueError):
        LossWeights(1.0, float("nan"))
