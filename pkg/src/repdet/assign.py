"""Label assignment for anchor-free heads: ATSS, SimOTA and task-aligned (TAL).

Determinism rules shared by every assigner:

* ties in a ranking go to the lower anchor index;
* an anchor claimed by several GTs keeps the claim with the best key
  (IoU for ATSS/TAL, cost for SimOTA), ties to the lower GT index;
* transcendentals (``pow``, ``log``) are evaluated with scalar libm calls and
  sums are accumulated sequentially, so results do not depend on SIMD width.

A GT that ends with no positive anchor is optionally force-matched to its
highest-IoU unclaimed anchor (``force_match``); such anchors are flagged in
``Assignment.forced``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

PROB_EPS = 1e-9
INSIDE_EPS = 1e-9


@dataclass
class Anchors:
    """Anchor points ``(x + 0.5) * stride`` in level-major, row-major order."""

    points: np.ndarray  # (A, 2) cx, cy
    strides: np.ndarray  # (A,)
    levels: np.ndarray  # (A,)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def grid(cls, sizes: Sequence, strides: Sequence) -> "Anchors":
        pts, st, lv = [], [], []
        for level, ((h, w), s) in enumerate(zip(sizes, strides)):
            ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
            pts.append(np.stack([(xs.ravel() + 0.5) * s, (ys.ravel() + 0.5) * s], axis=1))
            st.append(np.full(h * w, float(s)))
            lv.append(np.full(h * w, level))
        return cls(np.concatenate(pts).astype(np.float64), np.concatenate(st),
                   np.concatenate(lv).astype(np.int64))

    @classmethod
    def for_image(cls, size: int, strides=(8, 16, 32)) -> "Anchors":
        return cls.grid([(size // s, size // s) for s in strides], strides)


@dataclass
class GtBox:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int = 0

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate GT box {self}")
        if self.class_id < 0:
            raise ValueError("class_id must be >= 0")


def stack_gts(gts) -> tuple:
    """``(boxes (G, 4), classes (G,))`` from GtBox lists or an ``(boxes, classes)`` pair."""
    if isinstance(gts, tuple) and len(gts) == 2 and isinstance(gts[0], np.ndarray):
        boxes, classes = gts
        return np.asarray(boxes, np.float64).reshape(-1, 4), np.asarray(classes, np.int64)
    boxes = np.array([[g.x1, g.y1, g.x2, g.y2] for g in gts], dtype=np.float64).reshape(-1, 4)
    return boxes, np.array([g.class_id for g in gts], dtype=np.int64)


@dataclass
class Assignment:
    matched_gt: np.ndarray  # (A,) GT index, -1 for background
    fg_weight: np.ndarray  # (A,) > 0 exactly on positives
    assigned_class: np.ndarray  # (A,) -1 for background
    assigned_box: np.ndarray  # (A, 4)
    forced: np.ndarray = None  # (A,) bool
    soft: bool = False  # fg_weight already carries the quality (TAL)
    strategy: str = ""

    def __post_init__(self):
        if self.forced is None:
            self.forced = np.zeros(len(self.matched_gt), dtype=bool)

    @property
    def positives(self) -> np.ndarray:
        return self.matched_gt >= 0

    @property
    def num_pos(self) -> int:
        return int(self.positives.sum())

    @classmethod
    def from_matches(cls, matched: np.ndarray, weight: np.ndarray, boxes, classes, **kw):
        pos = matched >= 0
        cls_ = np.full(len(matched), -1, dtype=np.int64)
        box = np.zeros((len(matched), 4))
        cls_[pos] = classes[matched[pos]]
        box[pos] = boxes[matched[pos]]
        return cls(matched, np.where(pos, weight, 0.0), cls_, box, **kw)


def _empty(n: int, strategy: str, soft=False) -> Assignment:
    return Assignment(np.full(n, -1, dtype=np.int64), np.zeros(n), np.full(n, -1, dtype=np.int64),
                      np.zeros((n, 4)), soft=soft, strategy=strategy)


# ----------------------------------------------------------------- primitives
def pairwise_iou(boxes_a, boxes_b) -> np.ndarray:
    a = np.asarray(boxes_a, np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / np.maximum(union, 1e-12)


def centers_inside(points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """(G, A) mask: anchor point strictly inside the GT box."""
    x, y = points[None, :, 0], points[None, :, 1]
    d = np.stack([x - boxes[:, None, 0], y - boxes[:, None, 1],
                  boxes[:, None, 2] - x, boxes[:, None, 3] - y])
    return d.min(axis=0) > INSIDE_EPS


_pow = np.frompyfunc(math.pow, 2, 1)
_log = np.frompyfunc(math.log, 1, 1)


def _libm(f, *args) -> np.ndarray:
    return np.asarray(f(*args), dtype=np.float64)


def _seq_sum(values: np.ndarray) -> float:
    return float(np.cumsum(values)[-1]) if len(values) else 0.0


@dataclass(frozen=True)
class TalConfig:
    alpha: float = 1.0
    beta: float = 6.0
    topk: int = 13

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.topk < 1:
            raise ValueError("alpha, beta >= 0 and topk >= 1 required")


def alignment_metric(s, u, cfg: TalConfig = TalConfig()):
    """t = s**alpha * u**beta (scalar libm pow, elementwise)."""
    s = np.asarray(s, np.float64)
    u = np.asarray(u, np.float64)
    t = _libm(_pow, s, cfg.alpha) * _libm(_pow, u, cfg.beta)
    return float(t) if t.ndim == 0 else t


def _resolve(claims: np.ndarray, key: np.ndarray, higher_better=True) -> np.ndarray:
    """Per anchor, the claiming GT with the best key (first GT on ties)."""
    fill = -np.inf if higher_better else np.inf
    k = np.where(claims, key, fill)
    best = np.argmax(k, axis=0) if higher_better else np.argmin(k, axis=0)
    return np.where(claims.any(axis=0), best, -1)


def _force(matched, ious, forced, force_match: bool):
    """Give each GT without positives its best unclaimed anchor (IoU > 0)."""
    if not force_match:
        return
    for g in range(ious.shape[0]):
        if np.any(matched == g):
            continue
        avail = np.where(matched < 0, ious[g], -1.0)
        a = int(np.argmax(avail))
        if avail[a] > 0:
            matched[a] = g
            forced[a] = True


# ------------------------------------------------------------------------ ATSS
def atss_assign(anchors: Anchors, gts, topk: int = 9, anchor_scale: float = 5.0,
                force_match: bool = True) -> Assignment:
    """ATSS over square anchor boxes of side ``anchor_scale * stride``.

    Per GT and level, the ``topk`` anchors nearest the GT centre are candidates;
    positives have IoU >= mean + std (sample std) of the candidate IoUs and a
    centre strictly inside the GT.
    """
    boxes, classes = stack_gts(gts)
    n = len(anchors)
    if len(boxes) == 0:
        return _empty(n, "atss")
    half = anchor_scale * anchors.strides / 2
    pts = anchors.points
    abox = np.stack([pts[:, 0] - half, pts[:, 1] - half, pts[:, 0] + half, pts[:, 1] + half], 1)
    ious = pairwise_iou(boxes, abox)
    gc = (boxes[:, :2] + boxes[:, 2:]) / 2
    d2 = (pts[None, :, 0] - gc[:, None, 0]) ** 2 + (pts[None, :, 1] - gc[:, None, 1]) ** 2
    cand = np.zeros_like(ious, dtype=bool)
    for lvl in np.unique(anchors.levels):
        idx = np.flatnonzero(anchors.levels == lvl)
        k = min(topk, len(idx))
        order = np.argsort(d2[:, idx], axis=1, kind="stable")[:, :k]
        rows = np.repeat(np.arange(len(boxes)), k)
        cand[rows, idx[order.ravel()]] = True
    thr = np.zeros(len(boxes))
    for g in range(len(boxes)):
        v = ious[g, cand[g]]
        mean = _seq_sum(v) / len(v)
        std = math.sqrt(_seq_sum((v - mean) ** 2) / (len(v) - 1)) if len(v) > 1 else 0.0
        thr[g] = mean + std
    pos = cand & (ious >= thr[:, None]) & centers_inside(pts, boxes)
    matched = _resolve(pos, ious)
    forced = np.zeros(n, dtype=bool)
    _force(matched, ious, forced, force_match)
    return Assignment.from_matches(matched, np.ones(n), boxes, classes, forced=forced,
                                   strategy="atss")


# ---------------------------------------------------------------------- SimOTA
def simota_cost(cls_scores: np.ndarray, classes: np.ndarray, ious: np.ndarray,
                cost_cls_weight=1.0, cost_iou_weight=3.0) -> np.ndarray:
    """(G, A) cost: BCE of the class scores against the GT's one-hot label plus
    ``cost_iou_weight * -log(IoU + 1e-8)``."""
    p = np.clip(np.asarray(cls_scores, np.float64), PROB_EPS, 1 - PROB_EPS)
    logp, log1mp = _libm(_log, p), _libm(_log, 1.0 - p)
    n_cls = p.shape[1]
    cls_cost = np.zeros(ious.shape)
    for c in range(n_cls):  # sequential over classes
        onehot = classes[:, None] == c
        cls_cost = cls_cost + np.where(onehot, -logp[None, :, c], -log1mp[None, :, c])
    return cost_cls_weight * cls_cost + cost_iou_weight * -_libm(_log, ious + 1e-8)


def simota_assign(anchors: Anchors, gts, cls_scores, pred_boxes, center_radius: float = 2.5,
                  cost_cls_weight: float = 1.0, cost_iou_weight: float = 3.0,
                  dynamic_topk: int = 10, force_match: bool = True) -> Assignment:
    boxes, classes = stack_gts(gts)
    n = len(anchors)
    if len(boxes) == 0:
        return _empty(n, "simota")
    pts, st = anchors.points, anchors.strides
    gc = (boxes[:, :2] + boxes[:, 2:]) / 2
    r = center_radius * st[None, :]
    in_ctr = (np.abs(pts[None, :, 0] - gc[:, None, 0]) < r) & \
             (np.abs(pts[None, :, 1] - gc[:, None, 1]) < r)
    cand = centers_inside(pts, boxes) | in_ctr
    ious = pairwise_iou(boxes, pred_boxes)
    cost = np.where(cand, simota_cost(cls_scores, classes, ious, cost_cls_weight,
                                      cost_iou_weight), np.inf)
    claims = np.zeros_like(cand)
    for g in range(len(boxes)):
        idx = np.flatnonzero(cand[g])
        if len(idx) == 0:
            continue
        top = -np.sort(-ious[g, idx])[:dynamic_topk]
        k = min(max(int(math.floor(_seq_sum(top))), 1), len(idx))
        order = np.lexsort((idx, cost[g, idx]))[:k]
        claims[g, idx[order]] = True
    matched = _resolve(claims, cost, higher_better=False)
    forced = np.zeros(n, dtype=bool)
    _force(matched, ious, forced, force_match)
    return Assignment.from_matches(matched, np.ones(n), boxes, classes, forced=forced,
                                   strategy="simota")


# ------------------------------------------------------------------------- TAL
def tal_assign(anchors: Anchors, gts, cls_scores, pred_boxes, cfg: TalConfig = TalConfig(),
               force_match: bool = True) -> Assignment:
    """Task-aligned assignment.

    Candidates are anchors inside the GT with metric t > 0; each GT keeps its
    top-k by t; conflicts go to the larger IoU.  Positive weights are t scaled
    per GT so the largest equals that GT's best positive IoU.
    """
    boxes, classes = stack_gts(gts)
    n = len(anchors)
    if len(boxes) == 0:
        return _empty(n, "tal", soft=True)
    scores = np.asarray(cls_scores, np.float64)[:, classes].T  # (G, A)
    ious = pairwise_iou(boxes, pred_boxes)
    t = alignment_metric(scores, ious, cfg)
    cand = centers_inside(anchors.points, boxes) & (t > 0)
    claims = np.zeros_like(cand)
    for g in range(len(boxes)):
        idx = np.flatnonzero(cand[g])
        order = np.lexsort((idx, -t[g, idx]))[:cfg.topk]
        claims[g, idx[order]] = True
    matched = _resolve(claims, ious)
    forced = np.zeros(n, dtype=bool)
    _force(matched, ious, forced, force_match)
    weight = np.zeros(n)
    for g in range(len(boxes)):
        sel = np.flatnonzero((matched == g) & ~forced)
        if len(sel):
            weight[sel] = (t[g, sel] / t[g, sel].max()) * ious[g, sel].max()
        fsel = np.flatnonzero((matched == g) & forced)
        weight[fsel] = ious[g, fsel]
    return Assignment.from_matches(matched, weight, boxes, classes, forced=forced, soft=True,
                                   strategy="tal")


# ----------------------------------------------------------------- scheduling
WARM_STRATEGIES = ("none", "atss", "simota")


def warmup_schedule(epoch: int, warmup_epochs: int, warm: str = "atss", main: str = "tal") -> str:
    if warmup_epochs < 0:
        raise ValueError("warmup_epochs must be >= 0")
    if warm not in WARM_STRATEGIES:
        raise ValueError(f"warm strategy must be one of {WARM_STRATEGIES}")
    if warm == "none" or epoch >= warmup_epochs:
        return main
    return warm


def run_assigner(name: str, anchors: Anchors, gts, cls_scores, pred_boxes,
                 tal_cfg: Optional[TalConfig] = None, **kw) -> Assignment:
    if name == "tal":
        return tal_assign(anchors, gts, cls_scores, pred_boxes, tal_cfg or TalConfig(), **kw)
    if name == "simota":
        return simota_assign(anchors, gts, cls_scores, pred_boxes, **kw)
    if name == "atss":
        return atss_assign(anchors, gts, **kw)
    raise ValueError(f"unknown assigner {name!r}")
