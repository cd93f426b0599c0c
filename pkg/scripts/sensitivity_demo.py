"""Sensitivity analysis on a model with one badly scaled layer.

Scans every conv under the three output metrics, then sweeps how many of
the most sensitive layers stay in float and reports the output MSE.

    python3 scripts/sensitivity_demo.py [--depth 10] [--bad-layer 4]
"""

import argparse

from repdet.quant import (calibrate_graph, output_mse, partial_quantize, pathological_model,
                          quantizable_layers, sensitivity_scan)
from repdet.reparam import fuse_graph
from repdet.rng import make_rng


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--depth", type=int, default=10)
    ap.add_argument("--bad-layer", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    calib = make_rng(args.seed, "demo_calib").uniform(-1, 1, (4, 3, 12, 12))
    g = fuse_graph(pathological_model(calib, depth=args.depth, bad_layer=args.bad_layer))
    params = calibrate_graph(g, calib)
    rep = sensitivity_scan(g, params, calib)

    print(rep.to_csv(), end="")
    for m in ("mse", "snr", "cosine"):
        print(f"top-3 by {m}: {', '.join(rep.top(m, 3))}")
    print("float_top_k,output_mse")
    for k in range(len(quantizable_layers(g)) + 1):
        mse = output_mse(g, partial_quantize(g, params, rep, k), calib) if k < len(rep.layers) else 0.0
        print(f"{k},{mse:.6e}")


if __name__ == "__main__":
    main()
