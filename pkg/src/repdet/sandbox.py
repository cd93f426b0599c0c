"""Desk-scale objective optimisation.

The free parameters are the per-anchor class logits and regression logits
themselves (no network), so a run exercises assignment, the detection loss
and distillation jointly in milliseconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .assign import Anchors, Assignment, run_assigner, stack_gts, warmup_schedule
from .losses import (DistillConfig, LossWeights, Prediction, cosine_alpha, detection_loss,
                     kd_loss)
from .quant import SCALE_FLOOR, QuantParams, fake_quantize, fake_quantize_grad


class DivergenceError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class SandboxConfig:
    num_classes: int = 1
    reg_max: int = 16  # 0 selects plain distance regression
    cls_kind: str = "vfl"
    reg_kind: str = "giou"
    use_obj: bool = False
    weights: LossWeights = LossWeights()
    assigner: str = "tal"
    warmup_assigner: str = "none"
    warmup_epochs: int = 0
    steps_per_epoch: int = 1
    steps: int = 2000
    lr: float = 0.5
    plain_init: float = 1.0  # initial ltrb distance (strides) in plain mode
    qat_bits: int = 0  # > 0 trains through fake quantizers (straight-through gradients)


@dataclass
class Trajectory:
    loss: list = field(default_factory=list)
    det_loss: list = field(default_factory=list)
    mean_iou: list = field(default_factory=list)
    num_pos: list = field(default_factory=list)
    final: Optional[Prediction] = None
    final_assignment: Optional[Assignment] = None

    def to_csv(self) -> str:
        rows = ["step,loss,det_loss,mean_pos_iou,num_pos"]
        for i, v in enumerate(zip(self.loss, self.det_loss, self.mean_iou, self.num_pos)):
            rows.append(f"{i},{v[0]:.10g},{v[1]:.10g},{v[2]:.10g},{v[3]}")
        return "\n".join(rows) + "\n"


def initial_prediction(anchors: Anchors, cfg: SandboxConfig, with_obj: bool = False) -> Prediction:
    n = len(anchors)
    if cfg.reg_max > 0:
        reg = np.zeros((n, 4, cfg.reg_max + 1))
    else:
        reg = np.full((n, 4), cfg.plain_init)
    obj = np.zeros(n) if with_obj else None
    return Prediction(np.zeros((n, cfg.num_classes)), reg, anchors, obj)


def sandbox_fit(anchors: Anchors, gts, cfg: SandboxConfig = SandboxConfig(),
                teacher: Optional[Prediction] = None,
                distill: Optional[DistillConfig] = None) -> Trajectory:
    """Plain gradient descent on ``L_det + alpha * L_kd`` with periodic re-assignment."""
    boxes, classes = stack_gts(gts)
    if len(classes) and classes.max() >= cfg.num_classes:
        raise ValueError("GT class id exceeds num_classes")
    if teacher is not None and distill is None:
        distill = DistillConfig(total_steps=cfg.steps)
    pred = initial_prediction(anchors, cfg, with_obj=cfg.use_obj)
    traj = Trajectory()
    assignment = None
    for step in range(cfg.steps + 1):
        if step % cfg.steps_per_epoch == 0 or assignment is None:
            epoch = step // cfg.steps_per_epoch
            name = warmup_schedule(epoch, cfg.warmup_epochs, cfg.warmup_assigner, cfg.assigner)
            assignment = run_assigner(name, anchors, (boxes, classes), pred.cls_probs, pred.boxes())
        seen = _fake_quant_view(pred, cfg.qat_bits) if cfg.qat_bits else None
        det = detection_loss(seen[0] if seen else pred, assignment, cfg.weights, cfg.cls_kind,
                             cfg.reg_kind, use_obj=cfg.use_obj)
        total = det.total
        g_cls, g_reg = det.grads["cls"], det.grads["reg"]
        if seen:
            g_cls = fake_quantize_grad(pred.cls_logits, seen[1], g_cls)
            g_reg = fake_quantize_grad(pred.reg, seen[2], g_reg)
        if teacher is not None:
            alpha = cosine_alpha(min(step, distill.total_steps), distill)
            kd = kd_loss(pred, teacher, distill.temperature, with_reg=pred.use_dfl)
            total += alpha * kd.total
            g_cls = g_cls + alpha * kd.grads["cls"]
            if "reg" in kd.grads:
                g_reg = g_reg + alpha * kd.grads["reg"]
        if not math.isfinite(total):
            raise DivergenceError(step, f"loss became {total} (lr={cfg.lr}); last finite "
                                        f"value {traj.loss[-1] if traj.loss else None}")
        traj.loss.append(total)
        traj.det_loss.append(det.total)
        traj.mean_iou.append(det.mean_pos_iou)
        traj.num_pos.append(assignment.num_pos)
        if step == cfg.steps:
            break
        pred.cls_logits = pred.cls_logits - cfg.lr * g_cls
        pred.reg = pred.reg - cfg.lr * g_reg
        if pred.obj_logits is not None:
            pred.obj_logits = pred.obj_logits - cfg.lr * det.grads["obj"]
    traj.final = pred
    traj.final_assignment = assignment
    return traj


def _fake_quant_view(pred: Prediction, bits: int):
    """Per-tensor symmetric fake-quantized copy of the logits with minmax scales
    observed at the current step."""
    qs = []
    for a in (pred.cls_logits, pred.reg):
        qmax = 2 ** (bits - 1) - 1
        qs.append(QuantParams(max(float(np.max(np.abs(a))) / qmax, SCALE_FLOOR), bits=bits))
    view = Prediction(fake_quantize(pred.cls_logits, qs[0]), fake_quantize(pred.reg, qs[1]),
                      pred.anchors, pred.obj_logits)
    return view, qs[0], qs[1]


def single_gt_instance(grid: int = 8, stride: int = 8, box=None):
    """One GT on a ``grid x grid`` map; the default box is an off-centre rectangle."""
    anchors = Anchors.grid([(grid, grid)], [stride])
    size = grid * stride
    if box is None:
        box = (0.2 * size, 0.3 * size, 0.7 * size, 0.8 * size)
    return anchors, (np.array([box], float), np.array([0]))


def zero_gt_instance(grid: int = 8, stride: int = 8):
    return Anchors.grid([(grid, grid)], [stride]), (np.zeros((0, 4)), np.zeros(0, np.int64))


def random_instance(grid: int = 8, stride: int = 8, num_gts: int = 1, num_classes: int = 1,
                    seed: int = 0):
    """``num_gts`` random boxes (side 2 to grid/2 cells) inside a single-level map."""
    from .rng import make_rng

    rng = make_rng(seed, "sandbox_instance")
    size = grid * stride
    anchors = Anchors.grid([(grid, grid)], [stride])
    wh = rng.uniform(2 * stride, max(2 * stride + 1, size / 2), (num_gts, 2))
    lo = rng.uniform(0, 1, (num_gts, 2)) * (size - wh)
    boxes = np.concatenate([lo, lo + wh], 1) if num_gts else np.zeros((0, 4))
    classes = rng.integers(0, num_classes, num_gts) if num_gts else np.zeros(0, np.int64)
    return anchors, (boxes, classes)
