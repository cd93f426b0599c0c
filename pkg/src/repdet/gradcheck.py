"""Central finite-difference checks for every closed-form loss gradient.

Relative error of one sample point is ``max|a - n| / max(max|a|, max|n|, floor)``
with ``a`` the analytic and ``n`` the numeric gradient over all coordinates.
Sample points are drawn away from each loss's kinks (the singular sets listed
in ``SINGULAR_SETS``).  Near stationary points the denominator floor turns
the check into an absolute one at 1e-3 * 1e-4.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import losses as L
from .assign import Anchors
from .quant import cwd_loss
from .rng import make_rng

CLS = ("focal", "qfl", "vfl", "poly1")
BOX = ("giou", "diou", "ciou", "siou")
KINDS = CLS + BOX + ("dfl", "object", "kd", "cwd")
MARGIN = 0.02  # minimum distance (in box units) from any kink; 20x the FD step
FLOOR = 1e-3  # relative error is ill-conditioned at stationary points

SINGULAR_SETS = {
    "box": "pred and GT coordinates coinciding on an axis (min/max kinks), zero overlap "
           "width, equal pred/GT widths or heights",
    "siou": "additionally |dx| == |dy| and dx == 0 or dy == 0 between centres",
}


@dataclass
class GradcheckResult:
    kind: str
    trials: int
    worst_rel_err: float
    mean_rel_err: float
    h: float

    def to_dict(self) -> dict:
        return asdict(self)


def _rel(a: np.ndarray, n: np.ndarray, axis) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(a).max(axis=axis), np.abs(n).max(axis=axis)), FLOOR)
    return np.abs(a - n).max(axis=axis) / scale


def _batched_fd(f, x: np.ndarray, h: float) -> np.ndarray:
    """FD of an elementwise-in-rows loss ``f(x) -> (N,)`` w.r.t. ``x (N, ...)``."""
    g = np.zeros_like(x)
    flat = x.reshape(len(x), -1)
    gf = g.reshape(len(x), -1)
    for j in range(flat.shape[1]):
        xp, xm = flat.copy(), flat.copy()
        xp[:, j] += h
        xm[:, j] -= h
        gf[:, j] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return g


def _scalar_fd(f, x: np.ndarray, h: float) -> np.ndarray:
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def _boxes(rng, n):
    c = rng.uniform(0, 10, (n, 2))
    half = rng.uniform(0.5, 4, (n, 2))
    return np.concatenate([c - half, c + half], 1)


def _box_ok(p, g, kind):
    gaps = [np.abs(p[:, i][:, None] - g[:, [0, 2] if i % 2 == 0 else [1, 3]]).min(1)
            for i in range(4)]
    ok = np.min(gaps, axis=0) > MARGIN
    iw = np.minimum(p[:, 2], g[:, 2]) - np.maximum(p[:, 0], g[:, 0])
    ih = np.minimum(p[:, 3], g[:, 3]) - np.maximum(p[:, 1], g[:, 1])
    ok &= (np.abs(iw) > MARGIN) & (np.abs(ih) > MARGIN)
    w, h = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    ok &= (np.abs(w - (g[:, 2] - g[:, 0])) > MARGIN) & (np.abs(h - (g[:, 3] - g[:, 1])) > MARGIN)
    if kind == "siou":
        dx = (p[:, 0] + p[:, 2] - g[:, 0] - g[:, 2]) / 2
        dy = (p[:, 1] + p[:, 3] - g[:, 1] - g[:, 3]) / 2
        ok &= (np.abs(np.abs(dx) - np.abs(dy)) > MARGIN) & (np.abs(dx) > MARGIN)
        ok &= np.abs(dy) > MARGIN
    return ok


def _check_box(kind, rng, trials, h):
    preds, gts = [], []
    while sum(len(p) for p in preds) < trials:
        p, g = _boxes(rng, 4 * trials), _boxes(rng, 4 * trials)
        ok = _box_ok(p, g, kind)
        preds.append(p[ok])
        gts.append(g[ok])
    p = np.concatenate(preds)[:trials]
    g = np.concatenate(gts)[:trials]
    _, a = L.iou_loss(kind, p, g)
    n = _batched_fd(lambda x: L.iou_loss(kind, x, g)[0], p, h)
    return _rel(a, n, 1)


def _check_cls(kind, rng, trials, h):
    z = rng.uniform(-6, 6, trials)
    q = rng.uniform(0, 1, trials)
    q[: trials // 3] = 0.0
    _, a = L.cls_loss_logits(kind, z, q)
    n = (L.cls_loss_logits(kind, z + h, q)[0] - L.cls_loss_logits(kind, z - h, q)[0]) / (2 * h)
    return _rel(a[:, None], n[:, None], 1)


def _check_object(rng, trials, h):
    z = rng.uniform(-6, 6, trials)
    t = rng.uniform(0, 1, trials)
    t[: trials // 3] = np.round(t[: trials // 3])
    _, a = L.object_loss(z, t)
    n = (L.object_loss(z + h, t)[0] - L.object_loss(z - h, t)[0]) / (2 * h)
    return _rel(a[:, None], n[:, None], 1)


def _check_dfl(rng, trials, h, reg_max=16):
    z = rng.normal(0, 2, (trials, reg_max + 1))
    y = rng.uniform(0, reg_max, trials)
    _, a = L.dfl_loss(z, y)
    n = _batched_fd(lambda x: L.dfl_loss(x, y)[0], z, h)
    return _rel(a, n, 1)


def _check_kd(rng, trials, h, anchors=2, classes=2, reg_max=3):
    pts = Anchors(np.zeros((anchors, 2)), np.ones(anchors), np.zeros(anchors, np.int64))
    errs = np.empty(trials)
    for t in range(trials):
        T = float(rng.uniform(1, 4))
        tc, sc = rng.normal(0, 2, (2, anchors, classes))
        tr, sr = rng.normal(0, 2, (2, anchors, 4, reg_max + 1))
        teacher = L.Prediction(tc, tr, pts)

        def f(c, r):
            return L.kd_loss(L.Prediction(c, r, pts), teacher, T).total

        g = L.kd_loss(L.Prediction(sc, sr, pts), teacher, T).grads
        nc = _scalar_fd(lambda c: f(c, sr), sc, h)
        nr = _scalar_fd(lambda r: f(sc, r), sr, h)
        a = np.concatenate([g["cls"].ravel(), g["reg"].ravel()])
        n = np.concatenate([nc.ravel(), nr.ravel()])
        errs[t] = _rel(a, n, None)
    return errs


def _check_cwd(rng, trials, h, shape=(1, 2, 3, 3)):
    errs = np.empty(trials)
    for t in range(trials):
        T = float(rng.uniform(0.5, 4))
        tf, sf = rng.normal(0, 2, (2,) + shape)
        _, a = cwd_loss(tf, sf, T)
        n = _scalar_fd(lambda s: cwd_loss(tf, s, T)[0], sf, h)
        errs[t] = _rel(a, n, None)
    return errs


def gradcheck(kind: str, trials: int = 1000, seed: int = 0, h: float = 1e-3) -> GradcheckResult:
    if kind not in KINDS:
        raise ValueError(f"unknown loss kind {kind!r}; choose from {KINDS}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = make_rng(seed, "gradcheck", kind)
    if kind in CLS:
        errs = _check_cls(kind, rng, trials, h)
    elif kind in BOX:
        errs = _check_box(kind, rng, trials, h)
    elif kind == "dfl":
        errs = _check_dfl(rng, trials, h)
    elif kind == "object":
        errs = _check_object(rng, trials, h)
    elif kind == "kd":
        errs = _check_kd(rng, trials, h)
    else:
        errs = _check_cwd(rng, trials, h)
    return GradcheckResult(kind, trials, float(errs.max()), float(errs.mean()), h)
