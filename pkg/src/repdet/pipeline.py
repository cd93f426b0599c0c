"""Evaluation path: letterboxing, anchor-free decode, NMS, the F1 score proxy
and a CPU latency bench."""

from __future__ import annotations

import statistics
import time
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .assign import GtBox, pairwise_iou
from .blocks import HeadOutputs
from .graph import ModelGraph, forward
from .losses import dfl_expectation
from .reparam import is_fused
from .tensor import sigmoid

PAD_VALUE = 114


@dataclass(frozen=True)
class LetterboxSpec:
    target_size: int = 640
    border: int = 0
    pad_value: int = PAD_VALUE

    def __post_init__(self):
        if self.border < 0:
            raise ValueError("border must be >= 0")
        if self.content_size < 1:
            raise ValueError("target_size - 2 * border must be >= 1")
        if not 0 <= self.pad_value <= 255:
            raise ValueError("pad_value must be a 0-255 gray level")

    @property
    def content_size(self) -> int:
        return self.target_size - 2 * self.border


@dataclass(frozen=True)
class LetterboxTransform:
    """``x_out = x_in * scale_x + pad_x`` (same for y)."""

    scale_x: float
    scale_y: float
    pad_x: int
    pad_y: int
    orig_w: int
    orig_h: int
    new_w: int
    new_h: int

    def forward_boxes(self, boxes) -> np.ndarray:
        b = np.asarray(boxes, np.float64).reshape(-1, 4)
        s = np.array([self.scale_x, self.scale_y, self.scale_x, self.scale_y])
        p = np.array([self.pad_x, self.pad_y, self.pad_x, self.pad_y], np.float64)
        return b * s + p

    def inverse_boxes(self, boxes, clip: bool = True) -> np.ndarray:
        b = np.asarray(boxes, np.float64).reshape(-1, 4)
        s = np.array([self.scale_x, self.scale_y, self.scale_x, self.scale_y])
        p = np.array([self.pad_x, self.pad_y, self.pad_x, self.pad_y], np.float64)
        out = (b - p) / s
        if clip:
            out[:, [0, 2]] = out[:, [0, 2]].clip(0, self.orig_w)
            out[:, [1, 3]] = out[:, [1, 3]].clip(0, self.orig_h)
        return out


def resize_bilinear(image: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of an ``(H, W, C)`` array (float64 out)."""
    img = np.asarray(image, np.float64)
    h, w = img.shape[:2]
    if (h, w) == (new_h, new_w):
        return img.copy()

    def axis(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = pos.clip(0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(new_h, h)
    x0, x1, fx = axis(new_w, w)
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy[:, None, None]) + bot * fy[:, None, None]


def letterbox(image: np.ndarray, spec: LetterboxSpec = LetterboxSpec()):
    """Aspect-preserving resize into the content square, centred on a gray canvas.

    Returns ``(canvas (T, T, C) uint8, LetterboxTransform)``.
    """
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected a nonempty (H, W, C) image, got shape {img.shape}")
    h, w = img.shape[:2]
    c = spec.content_size
    r = c / max(h, w)
    nw, nh = max(1, min(c, round(w * r))), max(1, min(c, round(h * r)))
    resized = resize_bilinear(img, nh, nw)
    t = spec.target_size
    canvas = np.full((t, t, img.shape[2]), spec.pad_value, np.float64)
    px, py = (t - nw) // 2, (t - nh) // 2
    canvas[py:py + nh, px:px + nw] = resized
    canvas = np.clip(np.round(canvas), 0, 255).astype(np.uint8)
    return canvas, LetterboxTransform(nw / w, nh / h, px, py, w, h, nw, nh)


def image_to_tensor(image: np.ndarray, dtype=np.float32) -> np.ndarray:
    """``(H, W, C)`` uint8 to ``(1, C, H, W)`` in [0, 1]."""
    return (np.asarray(image, dtype).transpose(2, 0, 1)[None] / 255).astype(dtype)


# ----------------------------------------------------------------------- decode
@dataclass(frozen=True)
class Detection:
    box: tuple
    score: float
    class_id: int

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"invalid box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"box": [float(v) for v in self.box], "score": float(self.score),
                "class_id": int(self.class_id)}


def level_points(h: int, w: int, stride: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([(xs.ravel() + 0.5) * stride, (ys.ravel() + 0.5) * stride], 1)


def decode_level(cls_logits: np.ndarray, reg: np.ndarray, stride: int, reg_max: int):
    """One level of one image: ``(boxes (A, 4), probs (A, C))``.

    ``reg`` is ``(4 * (reg_max + 1), H, W)`` side-major bin logits, or
    ``(4, H, W)`` plain distances when ``reg_max == 0``; distances are in
    stride units.
    """
    c, h, w = cls_logits.shape
    probs = sigmoid(cls_logits.reshape(c, -1).T.astype(np.float64))
    r = reg.astype(np.float64)
    if reg_max > 0:
        ltrb = dfl_expectation(r.reshape(4, reg_max + 1, h * w).transpose(2, 0, 1))
    else:
        ltrb = r.reshape(4, h * w).T
    pts = level_points(h, w, stride)
    d = ltrb * stride
    boxes = np.concatenate([pts - d[:, :2], pts + d[:, 2:]], 1)
    return boxes, probs


def decode_predictions(head: HeadOutputs, conf_thresh: float = 0.25,
                       image_index: int = 0) -> list:
    """Anchor-free decode: one detection per anchor (best class) above threshold."""
    dets = []
    for cls_map, reg_map, stride in head.levels:
        boxes, probs = decode_level(cls_map[image_index], reg_map[image_index], stride,
                                    head.reg_max)
        cls_id = probs.argmax(1)
        score = probs[np.arange(len(probs)), cls_id]
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        for i in np.nonzero((score >= conf_thresh) & valid)[0]:
            dets.append(Detection(tuple(float(v) for v in boxes[i]), float(score[i]),
                                  int(cls_id[i])))
    return dets


# -------------------------------------------------------------------------- NMS
def nms(dets: Sequence[Detection], iou_thresh: float = 0.45, class_aware: bool = True,
        max_det: Optional[int] = None) -> list:
    """Greedy suppression in descending score order (input order breaks ties)."""
    if not 0 < iou_thresh < 1:
        raise ValueError("iou_thresh must lie in (0, 1)")
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    boxes = np.array([dets[i].box for i in order], np.float64)
    classes = np.array([dets[i].class_id for i in order])
    iou = pairwise_iou(boxes, boxes)
    alive = np.ones(len(order), bool)
    keep = []
    for j in range(len(order)):
        if not alive[j]:
            continue
        keep.append(dets[order[j]])
        if max_det is not None and len(keep) >= max_det:
            break
        hit = iou[j] >= iou_thresh
        if class_aware:
            hit &= classes == classes[j]
        alive &= ~hit
    return keep


# ---------------------------------------------------------------------- scoring
def _as_gt(g) -> tuple:
    if isinstance(g, GtBox):
        return tuple(g.box), g.class_id
    if isinstance(g, Detection):
        return g.box, g.class_id
    box, cls = g
    return tuple(box), int(cls)


def match_counts(dets: Sequence[Detection], gts: Sequence, iou_match: float = 0.5):
    """Greedy one-to-one matching in score order; returns ``(tp, fp, fn)``."""
    gts = [_as_gt(g) for g in gts]
    used = [False] * len(gts)
    tp = 0
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    gt_boxes = np.array([g[0] for g in gts], np.float64).reshape(-1, 4)
    for i in order:
        d = dets[i]
        if not gts:
            break
        ious = pairwise_iou(np.array([d.box]), gt_boxes)[0]
        best, best_iou = -1, iou_match
        for j, (_, c) in enumerate(gts):
            if not used[j] and c == d.class_id and ious[j] >= best_iou:
                if best < 0 or ious[j] > best_iou:
                    best, best_iou = j, ious[j]
        if best >= 0:
            used[best] = True
            tp += 1
    return tp, len(dets) - tp, len(gts) - tp


def score_proxy(dets_per_image: Sequence, gts_per_image: Sequence, iou_match: float = 0.5) -> float:
    """F1 over an evaluation set at IoU >= ``iou_match``."""
    if len(dets_per_image) != len(gts_per_image) or not gts_per_image:
        raise ValueError("need a nonempty evaluation set with one det list per image")
    tp = fp = fn = 0
    for d, g in zip(dets_per_image, gts_per_image):
        a, b, c = match_counts(d, g, iou_match)
        tp, fp, fn = tp + a, fp + b, fn + c
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def detect(graph: ModelGraph, batch: np.ndarray, conf: float = 0.25, iou: float = 0.45,
           max_det: int = 100) -> list:
    """Forward, decode and NMS for every image of a batch (letterbox space)."""
    head = HeadOutputs.from_outputs(graph, forward(graph, batch))
    return [nms(decode_predictions(head, conf, i), iou, True, max_det)
            for i in range(batch.shape[0])]


def self_consistency_evaluator(reference: ModelGraph, images: np.ndarray, conf: float = 0.25,
                               iou: float = 0.45, max_det: int = 100) -> Callable:
    """Evaluator whose labels are the reference model's own detections.

    The reference scores 1.0 by construction, so a graph's score measures how
    far its detections drift from the float model's on the same images.
    """
    labels = detect(reference, images, conf, iou, max_det)

    def evaluate(g: ModelGraph) -> float:
        return score_proxy(detect(g, images, conf, iou, max_det), labels)

    return evaluate


def toy_images(n: int, size: int, seed: int = 0) -> np.ndarray:
    """Random smooth images (N, 3, size, size) in [0, 1] built from a few boxes."""
    from .rng import make_rng

    rng = make_rng(seed, "toy_images")
    out = np.empty((n, 3, size, size), np.float32)
    for i in range(n):
        img = np.full((3, size, size), 114 / 255, np.float32)
        for _ in range(3):
            x1, y1 = rng.integers(0, size - 8, 2)
            w, h = rng.integers(8, max(9, size // 2), 2)
            img[:, y1:y1 + h, x1:x1 + w] = rng.uniform(0, 1, 3)[:, None, None]
        out[i] = img
    return out


# ------------------------------------------------------------------------ bench
def bench(graph: ModelGraph, batch_sizes: Sequence = (1,), iterations: int = 10,
          image_size: int = 64, warmup: int = 1, seed: int = 0) -> dict:
    """Median wall-clock latency per forward and throughput per batch size."""
    if not is_fused(graph):
        warnings.warn("benchmarking an unfused graph", stacklevel=2)
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    from .rng import make_rng

    channels = graph.node(graph.inputs[0]).attrs.get("channels", 3)
    dtype = next((v.dtype for n in graph.nodes for v in n.params.values()), np.float32)
    report = {}
    for bs in batch_sizes:
        x = make_rng(seed, "bench", str(bs)).uniform(0, 1, (bs, channels, image_size, image_size))
        x = x.astype(dtype)
        for _ in range(warmup):
            forward(graph, x)
        times = []
        for _ in range(iterations):
            t0 = time.perf_counter()
            forward(graph, x)
            times.append(time.perf_counter() - t0)
        med = statistics.median(times)
        report[int(bs)] = {"median_ms": med * 1e3, "items_per_s": bs / med,
                           "iterations": iterations}
    return report
