"""Random parameter factories shared by several test modules."""

import numpy as np

from repdet.assign import Anchors, Assignment
from repdet.layers import RepVGGBlockParams
from repdet.tensor import BatchNormParams, ConvSpec


def random_bn(r, c, dtype=np.float64, zero_var=False):
    var = np.zeros(c) if zero_var else r.uniform(0.2, 2.0, c)
    return BatchNormParams(r.uniform(0.3, 1.5, c).astype(dtype), r.normal(0, 0.5, c).astype(dtype),
                           r.normal(0, 0.5, c).astype(dtype), var.astype(dtype), 1e-5)


def random_repvgg(r, cin, cout, stride=1, groups=1, dtype=np.float64):
    w3 = r.normal(0, 1 / np.sqrt(9 * cin / groups), (cout, cin // groups, 3, 3)).astype(dtype)
    w1 = r.normal(0, 1 / np.sqrt(cin / groups), (cout, cin // groups, 1, 1)).astype(dtype)
    idbn = random_bn(r, cout, dtype) if (cin == cout and stride == 1) else None
    return RepVGGBlockParams(ConvSpec(w3, None, stride, 1, groups), random_bn(r, cout, dtype),
                             ConvSpec(w1, None, stride, 0, groups), random_bn(r, cout, dtype),
                             idbn)


def gr_trajectory_gap(seed, steps=100, lr=0.5, branches=("full", "center")):
    """(max-abs gap, distance travelled) between gradient-reparameterized plain training and the fused
    weights of plain SGD on the constant-scale two-branch form, in float64."""
    from repdet.reparam import GrConfig, gr_step, pad_1x1_to_3x3
    from repdet.tensor import conv2d, conv2d_grad_weight

    r = np.random.default_rng(seed)
    cin, cout = 3, 4
    x = r.normal(size=(2, cin, 6, 6))
    target = r.normal(size=(2, cout, 6, 6))
    scales = r.uniform(0.3, 1.5, (cout, 2)) * r.choice([-1, 1], (cout, 2))
    gr = GrConfig(scales, branches)
    wa = r.normal(0, 0.3, (cout, cin, 3, 3))
    wb = r.normal(0, 0.3, (cout, cin, 1, 1) if branches[1] == "center" else (cout, cin, 3, 3))

    def grad(w):
        spec = ConvSpec(w, None, 1, 1)
        return conv2d_grad_weight(x, conv2d(x, spec) - target, spec) / target.size

    def lift(b):
        return pad_1x1_to_3x3(b) if branches[1] == "center" else b

    s, t = scales[:, 0, None, None, None], scales[:, 1, None, None, None]
    plain = start = gr.equivalent_weight([wa, wb])
    for _ in range(steps):
        g = grad(s * wa + t * lift(wb))
        gb = g[:, :, 1:2, 1:2] if branches[1] == "center" else g
        wa, wb = wa - lr * s * g, wb - lr * t * gb
        plain = gr_step(plain, grad(plain), gr, lr)
    gap = float(np.max(np.abs(plain - (s * wa + t * lift(wb)))))
    return gap, float(np.max(np.abs(plain - start)))


# ------------------------------------------------------------ assignment corpus
LAYOUTS = [((64, (8, 16, 32))), ((96, (8, 16, 32))), ((128, (8, 16))), ((48, (8, 16)))]


def assign_instance(seed, quantized=None):
    """Random anchors (<= 400), 0-5 GTs, scores and predicted boxes.

    Quantized instances put coordinates on a coarse lattice and scores on a
    few levels so that ties in every ranking are common.
    """
    r = np.random.default_rng(seed)
    quantized = bool(seed % 2) if quantized is None else quantized
    size, strides = LAYOUTS[seed % len(LAYOUTS)]
    anchors = Anchors.for_image(size, strides)
    assert len(anchors) <= 400
    n_gt = int(r.integers(0, 6))
    n_cls = int(r.integers(1, 4))
    boxes = []
    for _ in range(n_gt):
        w, h = r.uniform(6, size * 0.7, 2)
        x1, y1 = r.uniform(0, size - w), r.uniform(0, size - h)
        b = [x1, y1, x1 + w, y1 + h]
        if quantized:
            b = [float(np.floor(v / 4) * 4) for v in b]
            b[2], b[3] = max(b[2], b[0] + 4), max(b[3], b[1] + 4)
        boxes.append(b)
    boxes = np.array(boxes, float).reshape(-1, 4)
    classes = r.integers(0, n_cls, n_gt)
    if quantized:
        scores = r.choice([0.1, 0.25, 0.5, 0.75], size=(len(anchors), n_cls))
        half = r.choice([4.0, 8.0, 12.0], size=(len(anchors), 2))
    else:
        scores = r.uniform(0.01, 0.99, (len(anchors), n_cls))
        half = r.uniform(2, 20, (len(anchors), 2))
    jitter = 0 if quantized else r.normal(0, 2, (len(anchors), 2))
    c = anchors.points + jitter
    preds = np.concatenate([c - half, c + half], 1)
    return anchors, boxes, classes, scores, preds


def as_lists(anchors, boxes, scores, preds):
    return ([tuple(p) for p in anchors.points.tolist()], anchors.strides.tolist(),
            anchors.levels.tolist(), [tuple(b) for b in boxes.tolist()], scores.tolist(),
            [tuple(p) for p in preds.tolist()])


def assert_same_assignment(a: Assignment, ref, boxes, classes):
    matched, weight, forced = ref
    assert a.matched_gt.tolist() == matched
    assert a.fg_weight.tolist() == weight  # bit-exact
    assert a.forced.tolist() == forced
    for i, m in enumerate(matched):
        if m >= 0:
            assert a.assigned_class[i] == classes[m]
            assert a.assigned_box[i].tolist() == boxes[m].tolist()
        else:
            assert a.assigned_class[i] == -1
