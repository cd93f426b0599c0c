"""Training objective with closed-form gradients.

Every loss returns ``(value, gradient)`` elementwise; gradients of the
classification and object losses are taken w.r.t. the pre-sigmoid logit, box
losses w.r.t. the predicted corners ``(x1, y1, x2, y2)``, DFL/KD w.r.t. the bin
logits.  Probabilities are clamped to ``[1e-9, 1 - 1e-9]`` before every log.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .assign import Anchors, Assignment, pairwise_iou
from .tensor import sigmoid

PROB_EPS = 1e-9
BOX_EPS = 1e-9
CLS_KINDS = ("focal", "qfl", "vfl", "poly1")
IOU_KINDS = ("giou", "diou", "ciou", "siou")

CLS_DEFAULTS = {
    "focal": {"alpha": 0.25, "gamma": 2.0},
    "qfl": {"beta": 2.0},
    "vfl": {"alpha": 0.75, "gamma": 2.0},
    "poly1": {"epsilon": 1.0},
}


def _log(p):
    return np.log(np.maximum(p, PROB_EPS))


# ------------------------------------------------------------- classification
def cls_loss_logits(kind: str, z, q, **cfg):
    """Elementwise classification loss on logits ``z`` with soft targets ``q``."""
    if kind not in CLS_KINDS:
        raise ValueError(f"unknown classification loss {kind!r}")
    c = {**CLS_DEFAULTS[kind], **cfg}
    z = np.asarray(z, np.float64)
    q = np.broadcast_to(np.asarray(q, np.float64), z.shape)
    if np.any((q < 0) | (q > 1)):
        raise ValueError("targets must lie in [0, 1]")
    p = sigmoid(z)
    lp, l1p = _log(p), _log(1.0 - p)
    bce = -(q * lp + (1 - q) * l1p)
    if kind == "focal":
        a, g = c["alpha"], c["gamma"]
        loss = -a * q * (1 - p) ** g * lp - (1 - a) * (1 - q) * p ** g * l1p
        grad = (-a * q * (-g * (1 - p) ** g * p * lp + (1 - p) ** (g + 1))
                - (1 - a) * (1 - q) * (g * p ** g * (1 - p) * l1p - p ** (g + 1)))
    elif kind == "qfl":
        b = c["beta"]
        d = p - q
        mod = np.abs(d) ** b
        loss = mod * bce
        grad = b * np.abs(d) ** (b - 1) * np.sign(d) * bce * p * (1 - p) + mod * d
    elif kind == "vfl":
        a, g = c["alpha"], c["gamma"]
        pos = q > 0
        loss = np.where(pos, q * bce, -a * p ** g * l1p)
        grad = np.where(pos, q * (p - q), -a * (g * p ** g * (1 - p) * l1p - p ** (g + 1)))
    else:  # poly1
        e = c["epsilon"]
        pt = q * p + (1 - q) * (1 - p)
        loss = bce + e * (1 - pt)
        grad = (p - q) - e * (2 * q - 1) * p * (1 - p)
    return loss, grad


def cls_loss(kind: str, p, q, **cfg):
    """Loss at probability ``p``; the gradient is w.r.t. the logit of ``p``."""
    p = np.asarray(p, np.float64)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("probabilities must lie in the open interval (0, 1)")
    return cls_loss_logits(kind, np.log(p) - np.log1p(-p), q, **cfg)


# ------------------------------------------------------------------- box losses
@dataclass
class _Geom:
    """Forward intermediates shared by the IoU-family losses."""

    pred: np.ndarray
    gt: np.ndarray

    def __post_init__(self):
        p, g = self.pred, self.gt
        self.w, self.h = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
        self.gw, self.gh = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
        self.degenerate = self.w * self.h <= BOX_EPS
        self.iw_raw = np.minimum(p[:, 2], g[:, 2]) - np.maximum(p[:, 0], g[:, 0])
        self.ih_raw = np.minimum(p[:, 3], g[:, 3]) - np.maximum(p[:, 1], g[:, 1])
        self.iw, self.ih = np.maximum(self.iw_raw, 0), np.maximum(self.ih_raw, 0)
        self.inter = self.iw * self.ih
        self.area = np.maximum(self.w * self.h, BOX_EPS)
        self.union = np.maximum(self.area + self.gw * self.gh - self.inter, BOX_EPS)
        self.iou = self.inter / self.union
        self.cw = np.maximum(p[:, 2], g[:, 2]) - np.minimum(p[:, 0], g[:, 0])
        self.ch = np.maximum(p[:, 3], g[:, 3]) - np.minimum(p[:, 1], g[:, 1])
        self.pcx, self.pcy = (p[:, 0] + p[:, 2]) / 2, (p[:, 1] + p[:, 3]) / 2
        self.gcx, self.gcy = (g[:, 0] + g[:, 2]) / 2, (g[:, 1] + g[:, 3]) / 2

    def backward(self, g_iou=0.0, g_inter=0.0, g_area=0.0, g_cw=0.0, g_ch=0.0, g_cx=0.0,
                 g_cy=0.0, g_w=0.0, g_h=0.0) -> np.ndarray:
        """Chain upstream grads of the named intermediates to the pred corners."""
        u, i = self.union, self.inter
        g_inter = g_inter + g_iou * (u + i) / u ** 2
        g_area = g_area - g_iou * i / u ** 2
        g_area = np.where(self.w * self.h > BOX_EPS, g_area, 0.0)
        g_w = g_w + g_area * self.h
        g_h = g_h + g_area * self.w
        g_iw, g_ih = g_inter * self.ih, g_inter * self.iw
        p, gt = self.pred, self.gt
        live_w, live_h = self.iw_raw > 0, self.ih_raw > 0
        out = np.empty_like(p)
        out[:, 0] = (-g_w + g_cx / 2 - g_iw * (live_w & (p[:, 0] > gt[:, 0]))
                     - g_cw * (p[:, 0] < gt[:, 0]))
        out[:, 2] = (g_w + g_cx / 2 + g_iw * (live_w & (p[:, 2] < gt[:, 2]))
                     + g_cw * (p[:, 2] > gt[:, 2]))
        out[:, 1] = (-g_h + g_cy / 2 - g_ih * (live_h & (p[:, 1] > gt[:, 1]))
                     - g_ch * (p[:, 1] < gt[:, 1]))
        out[:, 3] = (g_h + g_cy / 2 + g_ih * (live_h & (p[:, 3] < gt[:, 3]))
                     + g_ch * (p[:, 3] > gt[:, 3]))
        return out


def _giou(G):
    c = np.maximum(G.cw * G.ch, BOX_EPS)
    loss = 1 - G.iou + 1 - G.union / c
    # U = area + area_g - inter, so dL/dU = -1/C moves to area(+) and inter(-)
    grad = G.backward(g_iou=-1.0, g_area=-1.0 / c, g_inter=1.0 / c,
                      g_cw=G.union / c ** 2 * G.ch, g_ch=G.union / c ** 2 * G.cw)
    return loss, grad


def _diou_terms(G):
    dx, dy = G.pcx - G.gcx, G.pcy - G.gcy
    rho2 = dx ** 2 + dy ** 2
    c2 = np.maximum(G.cw ** 2 + G.ch ** 2, BOX_EPS)
    pen = rho2 / c2
    kw = dict(g_cx=2 * dx / c2, g_cy=2 * dy / c2,
              g_cw=-rho2 * 2 * G.cw / c2 ** 2, g_ch=-rho2 * 2 * G.ch / c2 ** 2)
    return pen, kw


def _diou(G):
    pen, kw = _diou_terms(G)
    return 1 - G.iou + pen, G.backward(g_iou=-1.0, **kw)


def _ciou(G):
    pen, kw = _diou_terms(G)
    h = np.maximum(G.h, BOX_EPS)
    delta = np.arctan(G.gw / G.gh) - np.arctan(G.w / h)
    v = 4 / math.pi ** 2 * delta ** 2
    d = 1 - G.iou + v + BOX_EPS
    aspect = v ** 2 / d  # = alpha * v with alpha = v / (1 - IoU + v)
    dv = (2 * v * d - v ** 2) / d ** 2
    r2 = G.w ** 2 + h ** 2
    kw["g_w"] = dv * 8 / math.pi ** 2 * delta * (-h / r2)
    kw["g_h"] = dv * 8 / math.pi ** 2 * delta * (G.w / r2)
    return 1 - G.iou + pen + aspect, G.backward(g_iou=-1.0 + v ** 2 / d ** 2, **kw)


SIOU_ANGLE_FORMS = ("sin2", "sin")


def _siou(G, theta=4.0, angle_form="sin2"):
    s_cw, s_ch = G.gcx - G.pcx, G.gcy - G.pcy
    sigma = np.sqrt(s_cw ** 2 + s_ch ** 2 + BOX_EPS ** 2)
    use_w = np.abs(s_cw) <= np.abs(s_ch)
    m = np.where(use_w, np.abs(s_cw), np.abs(s_ch))
    x = m / sigma  # sine of the smaller angle to an axis, <= sqrt(2)/2
    root = np.sqrt(1 - x ** 2)
    if angle_form == "sin2":
        lam = 2 * x * root  # 1 - 2 sin^2(arcsin(x) - pi/4)
        dlam_dx = 2 * (1 - 2 * x ** 2) / root
    elif angle_form == "sin":
        ang = np.arcsin(x) - math.pi / 4
        lam = 1 - 2 * np.sin(ang)
        dlam_dx = -2 * np.cos(ang) / root
    else:
        raise ValueError(f"angle_form must be one of {SIOU_ANGLE_FORMS}")
    gamma = 2 - lam
    cw, ch = np.maximum(G.cw, BOX_EPS), np.maximum(G.ch, BOX_EPS)
    rx, ry = (s_cw / cw) ** 2, (s_ch / ch) ** 2
    ex, ey = np.exp(-gamma * rx), np.exp(-gamma * ry)
    dist = 2 - ex - ey
    ow = np.abs(G.w - G.gw) / np.maximum(G.w, G.gw)
    oh = np.abs(G.h - G.gh) / np.maximum(G.h, G.gh)
    shape = (1 - np.exp(-ow)) ** theta + (1 - np.exp(-oh)) ** theta
    loss = 1 - G.iou + 0.5 * (dist + shape)

    # backward through distance/angle costs
    g_gamma = 0.5 * (rx * ex + ry * ey)
    g_x = -g_gamma * dlam_dx
    g_rx, g_ry = 0.5 * gamma * ex, 0.5 * gamma * ey
    dm_dscw = np.where(use_w, np.sign(s_cw), 0.0)
    dm_dsch = np.where(use_w, 0.0, np.sign(s_ch))
    g_scw = g_rx * 2 * s_cw / cw ** 2 + g_x * (dm_dscw / sigma - m * s_cw / sigma ** 3)
    g_sch = g_ry * 2 * s_ch / ch ** 2 + g_x * (dm_dsch / sigma - m * s_ch / sigma ** 3)
    g_cw = -g_rx * 2 * s_cw ** 2 / cw ** 3
    g_ch = -g_ry * 2 * s_ch ** 2 / ch ** 3
    # shape cost
    g_ow = 0.5 * theta * (1 - np.exp(-ow)) ** (theta - 1) * np.exp(-ow)
    g_oh = 0.5 * theta * (1 - np.exp(-oh)) ** (theta - 1) * np.exp(-oh)
    dow = np.where(G.w > G.gw, G.gw / np.maximum(G.w, BOX_EPS) ** 2, -1 / G.gw)
    doh = np.where(G.h > G.gh, G.gh / np.maximum(G.h, BOX_EPS) ** 2, -1 / G.gh)
    grad = G.backward(g_iou=-1.0, g_cw=g_cw, g_ch=g_ch, g_cx=-g_scw, g_cy=-g_sch,
                      g_w=g_ow * dow, g_h=g_oh * doh)
    return loss, grad


def iou_loss(kind: str, pred, gt, **cfg):
    """IoU-family loss for ``(N, 4)`` corner boxes; returns ``(loss, dloss/dpred)``.

    Degenerate predictions (area <= 1e-9) are evaluated with the area floored
    at 1e-9; :func:`degenerate_boxes` reports them.
    """
    pred = np.asarray(pred, np.float64).reshape(-1, 4)
    gt = np.asarray(gt, np.float64).reshape(-1, 4)
    if np.any(gt[:, 2] <= gt[:, 0]) or np.any(gt[:, 3] <= gt[:, 1]):
        raise ValueError("GT boxes must have positive width and height")
    G = _Geom(pred, gt)
    if kind == "giou":
        return _giou(G)
    if kind == "diou":
        return _diou(G)
    if kind == "ciou":
        return _ciou(G)
    if kind == "siou":
        return _siou(G, **cfg)
    raise ValueError(f"unknown IoU loss {kind!r}")


def degenerate_boxes(pred) -> np.ndarray:
    pred = np.asarray(pred, np.float64).reshape(-1, 4)
    return (pred[:, 2] - pred[:, 0]) * (pred[:, 3] - pred[:, 1]) <= BOX_EPS


# -------------------------------------------------------------------------- DFL
def softmax(z, axis=-1):
    z = np.asarray(z, np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = np.asarray(z, np.float64)
    s = z - z.max(axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def dfl_expectation(dist_logits) -> np.ndarray:
    """Expected bin index sum_i i * softmax(logits)_i over the last axis."""
    z = np.asarray(dist_logits, np.float64)
    if z.shape[-1] < 2:
        raise ValueError("need reg_max >= 1 (at least two bins)")
    return softmax(z) @ np.arange(z.shape[-1], dtype=np.float64)


def dfl_expectation_grad(dist_logits) -> np.ndarray:
    s = softmax(dist_logits)
    bins = np.arange(s.shape[-1], dtype=np.float64)
    return s * (bins - (s @ bins)[..., None])


def dfl_loss(dist_logits, target):
    """Distribution focal loss against continuous targets in ``[0, reg_max]``."""
    z = np.asarray(dist_logits, np.float64)
    reg_max = z.shape[-1] - 1
    if reg_max < 1:
        raise ValueError("need reg_max >= 1")
    y = np.broadcast_to(np.asarray(target, np.float64), z.shape[:-1])
    if np.any((y < 0) | (y > reg_max)):
        raise ValueError(f"targets must lie in [0, {reg_max}]")
    left = np.minimum(np.floor(y), reg_max - 1).astype(np.int64)
    wl, wr = left + 1 - y, y - left
    logp = np.maximum(log_softmax(z), math.log(PROB_EPS))
    lp_l = np.take_along_axis(logp, left[..., None], -1)[..., 0]
    lp_r = np.take_along_axis(logp, left[..., None] + 1, -1)[..., 0]
    loss = -(wl * lp_l + wr * lp_r)
    target_dist = np.zeros_like(z)
    np.put_along_axis(target_dist, left[..., None], wl[..., None], -1)
    np.put_along_axis(target_dist, left[..., None] + 1, wr[..., None], -1)
    return loss, softmax(z) - target_dist


# ----------------------------------------------------------------- object loss
def object_loss(obj_logit, target):
    """Binary cross-entropy with logits (hard or IoU-soft targets)."""
    z = np.asarray(obj_logit, np.float64)
    t = np.asarray(target, np.float64)
    loss = np.logaddexp(0.0, z) - t * z
    return loss, sigmoid(z) - t


# ---------------------------------------------------------------- predictions
@dataclass
class Prediction:
    """Per-anchor head outputs in logit space.

    ``reg`` is ``(A, 4, reg_max + 1)`` bin logits in DFL mode or ``(A, 4)``
    raw ltrb distances (stride units) in plain mode.
    """

    cls_logits: np.ndarray
    reg: np.ndarray
    anchors: Anchors
    obj_logits: Optional[np.ndarray] = None

    @property
    def use_dfl(self) -> bool:
        return self.reg.ndim == 3

    @property
    def reg_max(self) -> int:
        return self.reg.shape[-1] - 1 if self.use_dfl else 0

    @property
    def cls_probs(self) -> np.ndarray:
        return np.clip(sigmoid(self.cls_logits), PROB_EPS, 1 - PROB_EPS)

    def distances(self) -> np.ndarray:
        return dfl_expectation(self.reg) if self.use_dfl else np.asarray(self.reg, np.float64)

    def boxes(self) -> np.ndarray:
        return decode_distances(self.anchors, self.distances())


def decode_distances(anchors: Anchors, ltrb: np.ndarray) -> np.ndarray:
    s = anchors.strides[:, None]
    c = anchors.points
    return np.concatenate([c - ltrb[:, :2] * s, c + ltrb[:, 2:] * s], axis=1)


@dataclass(frozen=True)
class LossWeights:
    lambda_reg: float = 2.5
    mu_obj: float = 1.0  # only applied when the object branch is enabled
    dfl_weight: float = 0.2  # DFL share inside the regression term

    def __post_init__(self):
        for v in (self.lambda_reg, self.mu_obj, self.dfl_weight):
            if not (math.isfinite(v) and v >= 0):
                raise ValueError("loss weights must be finite and >= 0")


@dataclass
class DetLoss:
    total: float
    cls: float
    reg: float
    iou: float
    dfl: float
    obj: float
    grads: dict = field(default_factory=dict)
    mean_pos_iou: float = 0.0


def detection_loss(pred: Prediction, assignment: Assignment, weights: LossWeights = LossWeights(),
                   cls_kind: str = "vfl", reg_kind: str = "giou", use_dfl: Optional[bool] = None,
                   use_obj: bool = False, cls_targets: Optional[np.ndarray] = None,
                   **cls_cfg) -> DetLoss:
    """``L_cls + lambda * L_reg + mu * L_obj`` with gradients w.r.t. all logits.

    Classification runs over every anchor with soft targets on the assigned
    class (``fg_weight`` for soft assigners, ``fg_weight * IoU`` otherwise);
    regression and DFL run over positives weighted by ``fg_weight``.  All terms
    are normalised by ``max(sum fg_weight, 1)``.  ``cls_targets`` overrides the
    (detached) classification targets.
    """
    use_dfl = pred.use_dfl if use_dfl is None else use_dfl
    if use_dfl and not pred.use_dfl:
        raise ValueError("DFL requested but the prediction carries plain distances")
    n_anchor, n_cls = pred.cls_logits.shape
    pos = assignment.positives
    w = assignment.fg_weight
    norm = max(float(w.sum()), 1.0)
    boxes = pred.boxes()
    ious = np.zeros(n_anchor)
    if pos.any():
        ious[pos] = np.diag(pairwise_iou(boxes[pos], assignment.assigned_box[pos]))

    if cls_targets is None:
        q = np.zeros((n_anchor, n_cls))
        soft = w if assignment.soft else w * ious
        q[pos, assignment.assigned_class[pos]] = soft[pos]
    else:
        q = cls_targets
    lc, gc = cls_loss_logits(cls_kind, pred.cls_logits, q, **cls_cfg)
    l_cls = float(lc.sum()) / norm
    g_cls = gc / norm

    g_reg = np.zeros_like(pred.reg, dtype=np.float64)
    l_iou = l_dfl = 0.0
    if pos.any():
        li, gi = iou_loss(reg_kind, boxes[pos], assignment.assigned_box[pos])
        wp = w[pos] / norm
        l_iou = float((li * wp).sum())
        s = pred.anchors.strides[pos, None]
        g_dist = np.stack([-gi[:, 0], -gi[:, 1], gi[:, 2], gi[:, 3]], 1) * s * wp[:, None]
        if pred.use_dfl:
            g_reg[pos] = weights.lambda_reg * g_dist[..., None] * dfl_expectation_grad(pred.reg[pos])
        else:
            g_reg[pos] = weights.lambda_reg * g_dist
        if use_dfl:
            pts = pred.anchors.points[pos]
            gt = assignment.assigned_box[pos]
            tgt = np.concatenate([pts - gt[:, :2], gt[:, 2:] - pts], 1) / s
            tgt = np.clip(tgt, 0, pred.reg_max - 0.01)
            ld, gd = dfl_loss(pred.reg[pos], tgt)
            l_dfl = float((ld.mean(axis=1) * wp).sum())
            g_reg[pos] += weights.lambda_reg * weights.dfl_weight * gd * (wp[:, None, None] / 4)
    l_reg = l_iou + weights.dfl_weight * l_dfl

    l_obj = 0.0
    g_obj = None
    if use_obj:
        if pred.obj_logits is None:
            raise ValueError("object loss requested but prediction has no objectness logits")
        lo, go = object_loss(pred.obj_logits, np.where(pos, ious, 0.0))
        l_obj = float(lo.sum()) / norm
        g_obj = weights.mu_obj * go / norm

    total = l_cls + weights.lambda_reg * l_reg + weights.mu_obj * l_obj
    grads = {"cls": g_cls, "reg": g_reg}
    if g_obj is not None:
        grads["obj"] = g_obj
    mean_iou = float(ious[pos].mean()) if pos.any() else 0.0
    return DetLoss(total, l_cls, l_reg, l_iou, l_dfl, l_obj, grads, mean_iou)


# ---------------------------------------------------------------- distillation
def bernoulli_kl(zt, zs, temperature=1.0):
    """Per-class KL(teacher || student) of sigmoid probabilities at temperature T,
    scaled by T^2; gradient w.r.t. student logits."""
    T = temperature
    pt = np.clip(sigmoid(np.asarray(zt, np.float64) / T), PROB_EPS, 1 - PROB_EPS)
    ps = np.clip(sigmoid(np.asarray(zs, np.float64) / T), PROB_EPS, 1 - PROB_EPS)
    kl = pt * (np.log(pt) - np.log(ps)) + (1 - pt) * (np.log1p(-pt) - np.log1p(-ps))
    return T * T * kl, T * (ps - pt)


def categorical_kl(zt, zs, temperature=1.0):
    """KL(softmax(zt/T) || softmax(zs/T)) over the last axis, scaled by T^2.

    Both distributions are floored at 1e-9 and renormalised before the log, so
    identical logits give exactly zero.
    """
    T = temperature

    def clamped(z):
        p = np.maximum(softmax(np.asarray(z, np.float64) / T), PROB_EPS)
        return p / p.sum(axis=-1, keepdims=True)

    st, ss = clamped(zt), clamped(zs)
    kl = np.maximum((st * (np.log(st) - np.log(ss))).sum(axis=-1), 0.0)
    return T * T * kl, T * (softmax(np.asarray(zs, np.float64) / T) - st)


@dataclass
class KdLoss:
    total: float
    cls: float
    reg: float
    grads: dict = field(default_factory=dict)


def kd_loss(student: Prediction, teacher: Prediction, temperature: float = 1.0,
            with_reg: bool = True) -> KdLoss:
    """Self-distillation loss: classification KL plus regression KL over the
    four per-side DFL distributions (summed over sides), averaged over anchors.
    The teacher is constant."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if student.cls_logits.shape != teacher.cls_logits.shape:
        raise ValueError("student and teacher shapes differ")
    n = student.cls_logits.shape[0]
    kc, gc = bernoulli_kl(teacher.cls_logits, student.cls_logits, temperature)
    l_cls = float(kc.sum()) / n
    grads = {"cls": gc / n}
    l_reg = 0.0
    if with_reg:
        if not (student.use_dfl and teacher.use_dfl):
            raise ValueError("regression distillation needs DFL bin logits on both models")
        if student.reg.shape != teacher.reg.shape:
            raise ValueError("student and teacher regression shapes differ")
        kr, gr = categorical_kl(teacher.reg, student.reg, temperature)
        l_reg = float(kr.sum()) / n
        grads["reg"] = gr / n
    return KdLoss(l_cls + l_reg, l_cls, l_reg, grads)


@dataclass(frozen=True)
class DistillConfig:
    alpha_start: float = 1.0
    alpha_end: float = 0.0
    total_steps: int = 1000
    temperature: float = 1.0

    def __post_init__(self):
        if self.total_steps < 1 or self.temperature <= 0:
            raise ValueError("total_steps >= 1 and temperature > 0 required")


def cosine_alpha(step: int, cfg: DistillConfig) -> float:
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    c = (1 + math.cos(math.pi * step / cfg.total_steps)) / 2
    return cfg.alpha_end + (cfg.alpha_start - cfg.alpha_end) * c


def total_loss(det: float, kd: float, alpha: float) -> float:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return det + alpha * kd
