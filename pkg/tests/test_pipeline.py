import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import nms as nms_oracle
from repdet.blocks import HeadOutputs, build_model
from repdet.pipeline import (PAD_VALUE, Detection, LetterboxSpec, bench, decode_level,
                             decode_predictions, detect, image_to_tensor, letterbox, nms,
                             resize_bilinear, score_proxy, self_consistency_evaluator, toy_images)
from repdet.reparam import fuse_graph


# -------------------------------------------------------------------- letterbox
@pytest.mark.parametrize("border,content", [(3, 634), (16, 608), (0, 640)])
def test_gray_border_geometry(border, content):
    spec = LetterboxSpec(640, border)
    assert spec.content_size == content
    img = np.zeros((480, 640, 3), np.uint8)
    canvas, t = letterbox(img, spec)
    assert canvas.shape == (640, 640, 3)
    assert t.new_w == content and t.pad_x == border
    assert canvas[0, 0, 0] == PAD_VALUE and canvas[320, 320, 0] == 0
    rows = np.flatnonzero(canvas[:, 320, 0] == 0)
    assert rows.size == t.new_h == round(480 * content / 640)


def test_letterbox_square_pure_resize_round_trip():
    img = np.random.default_rng(0).integers(0, 255, (100, 100, 3)).astype(np.uint8)
    canvas, t = letterbox(img, LetterboxSpec(64, 0))
    assert (t.pad_x, t.pad_y, t.new_w) == (0, 0, 64)
    boxes = np.array([[10.0, 20.0, 50.0, 90.0]])
    assert np.max(np.abs(t.inverse_boxes(t.forward_boxes(boxes)) - boxes)) <= 0.5


@given(st.integers(1, 300), st.integers(1, 300), st.sampled_from([0, 3, 16]),
       st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_letterbox_inverse_round_trip(h, w, border, a, b, c, d):
    _, t = letterbox(np.zeros((h, w, 1), np.uint8), LetterboxSpec(128, border))
    x1, x2 = sorted((a * w, b * w))
    y1, y2 = sorted((c * h, d * h))
    box = np.array([[x1, y1, x2, y2]])
    fwd = t.forward_boxes(box)
    assert np.all(fwd[:, [0, 2]] >= t.pad_x - 1e-9) and np.all(fwd[:, [0, 2]] <= t.pad_x + t.new_w + 1e-9)
    assert np.max(np.abs(t.inverse_boxes(fwd) - box)) <= 0.5


def test_letterbox_spec_validation():
    with pytest.raises(ValueError):
        LetterboxSpec(640, -1)
    with pytest.raises(ValueError):
        LetterboxSpec(32, 16)
    with pytest.raises(ValueError):
        LetterboxSpec(640, 0, 300)
    with pytest.raises(ValueError):
        letterbox(np.zeros((0, 4, 3)))


def test_resize_bilinear_constant_and_identity():
    img = np.full((7, 5, 2), 3.0)
    assert np.allclose(resize_bilinear(img, 11, 13), 3.0)
    r = np.random.default_rng(1).normal(size=(4, 4, 1))
    assert np.array_equal(resize_bilinear(r, 4, 4), r)
    up = resize_bilinear(np.arange(4.0).reshape(1, 4, 1), 1, 8)[0, :, 0]
    assert np.all(np.diff(up) >= 0)


def test_image_to_tensor():
    x = image_to_tensor(np.full((2, 3, 3), 255, np.uint8))
    assert x.shape == (1, 3, 2, 3) and np.all(x == 1)


# ----------------------------------------------------------------------- decode
def test_decode_reference_box():
    cls = np.full((1, 2, 2), 5.0)
    reg = np.ones((4, 2, 2))
    boxes, probs = decode_level(cls, reg, 8, 0)
    # anchor (12, 12) is cell (1, 1)
    assert boxes[3].tolist() == [4.0, 4.0, 20.0, 20.0]
    assert probs.shape == (4, 1)


@given(st.floats(-0.9, 3.0))
def test_decode_equivariance(delta):
    rng = np.random.default_rng(0)
    reg = rng.uniform(1, 3, (4, 3, 3))
    cls = np.zeros((1, 3, 3))
    a, _ = decode_level(cls, reg, 16, 0)
    b, _ = decode_level(cls, reg + delta, 16, 0)
    assert np.allclose(b - a, np.array([-1, -1, 1, 1]) * delta * 16)


def test_decode_dfl_bins_side_major():
    reg_max = 4
    logits = np.full((4, reg_max + 1, 1, 1), -50.0)
    for side, b in enumerate([1, 2, 3, 4]):
        logits[side, b] = 50.0
    boxes, _ = decode_level(np.zeros((1, 1, 1)), logits.reshape(20, 1, 1), 8, reg_max)
    assert np.allclose(boxes[0], [4 - 8, 4 - 16, 4 + 24, 4 + 32])


def _head(reg_value, score_logit=3.0, reg_max=0):
    c = np.full((1, 2, 2, 2), -10.0)
    c[0, 1] = score_logit
    return HeadOutputs([(c, np.full((1, 4, 2, 2), reg_value), 8)], reg_max, 2)


def test_decode_filters_degenerate_and_threshold():
    assert decode_predictions(_head(0.0), 0.1) == []
    dets = decode_predictions(_head(1.0), 0.5)
    assert len(dets) == 4 and all(d.class_id == 1 for d in dets)
    assert decode_predictions(_head(1.0), 1.0 + 1e-9) == []


def test_detection_validation():
    with pytest.raises(ValueError):
        Detection((0, 0, 0, 1), 0.5, 0)
    with pytest.raises(ValueError):
        Detection((0, 0, 1, 1), 1.5, 0)


# -------------------------------------------------------------------------- NMS
def test_nms_identical_and_disjoint():
    a = Detection((0, 0, 10, 10), 0.9, 0)
    b = Detection((0, 0, 10, 10), 0.9, 0)
    kept = nms([a, b])
    assert len(kept) == 1 and kept[0] is a
    far = [Detection((i * 20.0, 0, i * 20.0 + 10, 10), 0.5, 0) for i in range(5)]
    assert nms(far) == far
    with pytest.raises(ValueError):
        nms([a], 1.0)


@given(st.integers(0, 10_000), st.booleans(), st.floats(0.1, 0.9))
def test_nms_matches_oracle(seed, aware, thr):
    r = np.random.default_rng(seed)
    xy = r.uniform(0, 30, (10, 2))
    wh = r.uniform(3, 20, (10, 2))
    boxes = np.concatenate([xy, xy + wh], 1)
    scores = np.round(r.uniform(0, 1, 10), 1)  # coarse scores force ties
    classes = r.integers(0, 2, 10)
    dets = [Detection(tuple(b), float(s), int(c)) for b, s, c in zip(boxes, scores, classes)]
    kept = nms(dets, thr, aware)
    expected = [dets[i] for i in nms_oracle(boxes.tolist(), scores.tolist(), classes.tolist(), thr, aware)]
    assert kept == expected
    assert all(x.score >= y.score for x, y in zip(kept, kept[1:]))
    from oracles import box_iou
    for i, x in enumerate(kept):
        for y in kept[i + 1:]:
            if not aware or x.class_id == y.class_id:
                assert box_iou(x.box, y.box) < thr


def test_nms_max_det():
    dets = [Detection((i * 20.0, 0, i * 20.0 + 10, 10), 0.5, 0) for i in range(5)]
    assert len(nms(dets, max_det=2)) == 2


# ---------------------------------------------------------------------- scoring
def test_score_proxy_values():
    gts = [((0, 0, 10, 10), 0), ((20, 20, 30, 30), 1)]
    perfect = [Detection(b, 0.9, c) for b, c in gts]
    assert score_proxy([perfect], [gts]) == 1.0
    assert score_proxy([[]], [gts]) == 0.0
    assert score_proxy([perfect[:1]], [gts]) == pytest.approx(2 / 3)
    wrong_class = [Detection((0, 0, 10, 10), 0.9, 1)]
    assert score_proxy([wrong_class], [gts[:1]]) == 0.0
    assert score_proxy([[]], [[]]) == 1.0
    with pytest.raises(ValueError):
        score_proxy([], [])


def test_score_proxy_one_to_one():
    gts = [((0, 0, 10, 10), 0)]
    dup = [Detection((0, 0, 10, 10), 0.9, 0), Detection((0, 0, 10, 10), 0.8, 0)]
    assert score_proxy([dup], [gts]) == pytest.approx(2 / 3)


def test_detect_and_self_consistency():
    g = fuse_graph(build_model("n", num_classes=3, seed=2))
    imgs = toy_images(2, 64, seed=1)
    dets = detect(g, imgs, conf=0.0, max_det=20)
    assert len(dets) == 2 and all(len(d) <= 20 for d in dets)
    ev = self_consistency_evaluator(g, imgs, conf=0.0, max_det=20)
    assert ev(g) == 1.0


def test_toy_images_deterministic():
    a, b = toy_images(2, 32, 4), toy_images(2, 32, 4)
    assert np.array_equal(a, b) and a.shape == (2, 3, 32, 32)
    assert a.min() >= 0 and a.max() <= 1


# ------------------------------------------------------------------------ bench
def test_bench_report_shape():
    g = fuse_graph(build_model("n", num_classes=2))
    rep = bench(g, [1, 2], iterations=2, image_size=32)
    assert set(rep) == {1, 2}
    for v in rep.values():
        assert v["median_ms"] > 0 and v["items_per_s"] > 0 and v["iterations"] == 2
    with pytest.warns(UserWarning, match="unfused"):
        bench(build_model("n", num_classes=2), [1], iterations=1, image_size=32)
    with pytest.raises(ValueError):
        bench(g, [1], iterations=0)


def test_bench_repeat_stability():
    g = fuse_graph(build_model("n", num_classes=2))
    meds = [bench(g, [1], iterations=5, image_size=64)[1]["median_ms"] for _ in range(3)]
    # soft, machine-dependent bound
    assert max(meds) / min(meds) <= 1.2
