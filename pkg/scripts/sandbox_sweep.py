"""Compare loss/assigner combinations on random sandbox instances.

Reads an optional ``key = value`` config (same keys as RunConfig) and writes
one summary row per combination: mean final detection loss, mean final IoU
of the positives, and the final/initial loss ratio.

    python3 scripts/sandbox_sweep.py [--config run.cfg] [--seeds 5] [--out sweep.csv]
"""

import argparse
import csv
import itertools
import sys

import numpy as np

from repdet.config import RunConfig, load_kv
from repdet.losses import LossWeights
from repdet.sandbox import SandboxConfig, random_instance, sandbox_fit

CLS_KINDS = ("focal", "qfl", "vfl", "poly1")
REG_KINDS = ("giou", "ciou", "siou")
ASSIGNERS = ("tal", "simota", "atss")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--steps", type=int)
    ap.add_argument("--out")
    args = ap.parse_args(argv)
    run = RunConfig.from_kv(load_kv(args.config) if args.config else {}, steps=args.steps)

    out = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["cls_kind", "reg_kind", "assigner", "final_det_loss", "final_pos_iou", "ratio"])
    for cls_kind, reg_kind, assigner in itertools.product(CLS_KINDS, REG_KINDS, ASSIGNERS):
        cfg = SandboxConfig(num_classes=max(run.num_gts, 1), reg_max=run.reg_max,
                            cls_kind=cls_kind, reg_kind=reg_kind, assigner=assigner,
                            use_obj=run.use_obj, steps=run.steps, lr=run.lr,
                            weights=LossWeights(run.lambda_reg, run.mu_obj))
        finals, ious, ratios = [], [], []
        for seed in range(args.seeds):
            anchors, gts = random_instance(run.grid, run.stride, max(run.num_gts, 1),
                                           cfg.num_classes, seed + run.seed)
            tr = sandbox_fit(anchors, gts, cfg)
            finals.append(tr.det_loss[-1])
            ious.append(tr.mean_iou[-1])
            ratios.append(tr.det_loss[-1] / tr.det_loss[0])
        w.writerow([cls_kind, reg_kind, assigner, f"{np.mean(finals):.6g}",
                    f"{np.mean(ious):.6g}", f"{np.mean(ratios):.6g}"])
        out.flush()
    if out is not sys.stdout:
        out.close()


if __name__ == "__main__":
    main()
