"""``repdet`` command line.

Exit codes: 0 ok, 1 computational failure (tolerance or divergence), 2 usage,
3 I/O, 4 malformed model.  Options may also come from ``--config`` (flat
``key = value``); explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO, EXIT_MODEL = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("usage", message)
        raise SystemExit(EXIT_USAGE)


def _emit_error(kind: str, message: str):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


# ------------------------------------------------------------------- helpers
def _load(args):
    from .graph import load_graph

    if not args.model or not args.weights:
        raise CliError(EXIT_USAGE, "--model and --weights are required")
    return load_graph(args.model, args.weights)


def _write(path, text: str):
    from .io import atomic_write

    atomic_write(path, text.encode())


def _report(args, payload: dict, text: str = None):
    """Print JSON under --json (or when no text form exists), else ``text``."""
    if args.json or text is None:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(text)


def _calib_batches(args, graph):
    from .pipeline import LetterboxSpec, image_to_tensor, letterbox, toy_images
    from .io import read_ppm

    dtype = next((v.dtype for n in graph.nodes for v in n.params.values()), np.float32)
    if args.images:
        spec = LetterboxSpec(args.size, args.border)
        return [image_to_tensor(letterbox(read_ppm(p), spec)[0], dtype) for p in args.images]
    imgs = toy_images(args.num_calib, args.size, args.seed).astype(dtype)
    return [imgs[i:i + 1] for i in range(len(imgs))]


def _floats(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


# --------------------------------------------------------------- subcommands
def cmd_init(args):
    from .blocks import build_model
    from .graph import param_count, save_graph

    g = build_model(args.preset, num_classes=args.num_classes,
                    reg_max=args.reg_max if args.reg_max >= 0 else None, seed=args.seed,
                    with_head=not args.no_head)
    save_graph(g, args.model, args.weights)
    _report(args, {"model": args.model, "weights": args.weights, "preset": args.preset,
                   "params": param_count(g), "nodes": len(g.nodes)},
            f"wrote {args.model} ({param_count(g)} params, {len(g.nodes)} nodes)")


def cmd_fuse(args):
    from .graph import save_graph
    from .reparam import fuse_graph, op_count

    g = _load(args)
    f = fuse_graph(g)
    save_graph(f, args.out_model, args.out_weights)
    _report(args, {"ops_before": op_count(g), "ops_after": op_count(f),
                   "repvgg_blocks": g.count("repvgg_block"), "model": args.out_model},
            f"fused {g.count('repvgg_block')} RepVGG blocks: {op_count(g)} -> {op_count(f)} ops")


def cmd_equiv(args):
    from .graph import forward, load_graph
    from .reparam import fuse_graph
    from .rng import make_rng

    g = _load(args)
    if bool(args.fused_model) != bool(args.fused_weights):
        raise CliError(EXIT_USAGE, "--fused-model and --fused-weights go together")
    if args.fused_model:
        f = load_graph(args.fused_model, args.fused_weights)
    else:
        f = fuse_graph(g)
    ch = g.node(g.inputs[0]).attrs.get("channels", 3)
    rng = make_rng(args.seed, "equiv")
    worst = 0.0
    for _ in range(args.trials):
        x = rng.uniform(-1, 1, (1, ch, args.size, args.size)).astype(np.float32)
        a, b = forward(g, x), forward(f, x)
        for k in a:
            worst = max(worst, float(np.max(np.abs(a[k].astype(np.float64) - b[k]))))
    ok = worst <= args.tol
    _report(args, {"max_abs_diff": worst, "tol": args.tol, "trials": args.trials, "pass": ok},
            f"max-abs diff {worst:.3e} (tol {args.tol:g}): {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_infer(args):
    from .blocks import HeadOutputs
    from .graph import forward
    from .io import read_ppm
    from .pipeline import Detection, LetterboxSpec, decode_predictions, image_to_tensor, letterbox, nms

    g = _load(args)
    if "levels" not in g.meta:
        raise CliError(EXIT_MODEL, "model has no detection head")
    img = read_ppm(args.image)
    canvas, tf = letterbox(img, LetterboxSpec(args.size, args.border))
    dtype = next((v.dtype for n in g.nodes for v in n.params.values()), np.float32)
    head = HeadOutputs.from_outputs(g, forward(g, image_to_tensor(canvas, dtype)))
    dets = nms(decode_predictions(head, args.conf), args.iou, True, args.max_det)
    lines = []
    for d in dets:
        box = tf.inverse_boxes([d.box])[0]
        if box[2] > box[0] and box[3] > box[1]:
            lines.append(json.dumps(Detection(tuple(map(float, box)), d.score, d.class_id).to_dict(),
                                    sort_keys=True))
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)


def cmd_calibrate(args):
    from .quant import calibrate_graph, params_to_json

    g = _load(args)
    params = calibrate_graph(g, _calib_batches(args, g), args.quant_method, args.pct)
    text = params_to_json(params)
    if args.out:
        _write(args.out, text)
    _report(args, {"layers": len(params), "method": args.quant_method, "out": args.out},
            f"calibrated {len(params)} layers ({args.quant_method})")


def _params(args, g, batches):
    from .quant import calibrate_graph, params_from_json

    if args.params:
        return params_from_json(Path(args.params).read_text())
    return calibrate_graph(g, batches, args.quant_method, args.pct)


def cmd_sensitivity(args):
    from .pipeline import self_consistency_evaluator
    from .quant import sensitivity_scan

    g = _load(args)
    batches = _calib_batches(args, g)
    params = _params(args, g, batches)
    evaluator = None
    if args.score:
        if "levels" not in g.meta:
            raise CliError(EXIT_MODEL, "--score needs a model with a detection head")
        evaluator = self_consistency_evaluator(g, np.concatenate(batches))
    rep = sensitivity_scan(g, params, batches, evaluator)
    if args.out:
        _write(args.out, rep.to_csv())
    if args.out_json:
        _write(args.out_json, rep.to_json())
    top = rep.top(args.metric, min(6, len(rep.layers)))
    table = f"wrote {args.out} ({len(rep.layers)} layers)" if args.out else rep.to_csv().rstrip("\n")
    _report(args, json.loads(rep.to_json()), f"{table}\n# top by {args.metric}: {top}")


def cmd_ptq(args):
    from .graph import save_graph
    from .quant import (SensitivityReport, output_mse, partial_quantize, quantize_graph,
                        sensitivity_scan)

    g = _load(args)
    batches = _calib_batches(args, g)
    params = _params(args, g, batches)
    if args.top_k > 0:
        rep = (SensitivityReport.from_json(Path(args.report).read_text()) if args.report
               else sensitivity_scan(g, params, batches))
        q = partial_quantize(g, params, rep, args.top_k, args.metric)
    else:
        q = quantize_graph(g, params)
    err = output_mse(g, q, batches)
    if args.out_model:
        save_graph(q, args.out_model, args.out_weights)
    _report(args, {"top_k": args.top_k, "metric": args.metric, "output_mse": err,
                   "fakequant_nodes": q.count("fakequant")},
            f"quantized {q.count('fakequant')} layers; output MSE vs float {err:.4e}")


def cmd_bench(args):
    from .pipeline import bench
    from .reparam import fuse_graph, is_fused

    g = _load(args)
    graphs = {"model": g}
    if args.compare_fused and not is_fused(g):
        graphs["fused"] = fuse_graph(g)
    out = {}
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for name, gr in graphs.items():
            out[name] = {str(k): v for k, v in
                         bench(gr, _floats(args.batch), args.iters, args.size).items()}
    print(json.dumps(out, indent=2, sort_keys=True))


def cmd_sandbox(args):
    from .losses import LossWeights
    from .sandbox import DivergenceError, SandboxConfig, random_instance, sandbox_fit

    a, gts = random_instance(args.grid, args.stride, args.num_gts, args.num_classes, args.seed)
    cfg = SandboxConfig(num_classes=args.num_classes, reg_max=args.reg_max, cls_kind=args.cls_kind,
                        reg_kind=args.reg_kind, use_obj=args.use_obj,
                        weights=LossWeights(args.lambda_reg, args.mu_obj),
                        assigner=args.assigner, warmup_assigner=args.warmup_assigner,
                        warmup_epochs=args.warmup_epochs, steps=args.steps, lr=args.lr)
    try:
        tr = sandbox_fit(a, gts, cfg)
    except DivergenceError as e:
        raise CliError(EXIT_FAIL, str(e)) from e
    if args.out:
        _write(args.out, tr.to_csv())
    _report(args, {"initial_loss": tr.loss[0], "final_loss": tr.loss[-1],
                   "final_mean_pos_iou": tr.mean_iou[-1], "steps": args.steps, "csv": args.out},
            tr.to_csv() if not args.out else
            f"loss {tr.loss[0]:.4f} -> {tr.loss[-1]:.4g}; curve written to {args.out}")


def cmd_gradcheck(args):
    from .gradcheck import KINDS, gradcheck

    kinds = KINDS if args.loss == "all" else [args.loss]
    res = [gradcheck(k, args.trials, args.seed, args.h).to_dict() for k in kinds]
    worst = max(r["worst_rel_err"] for r in res)
    print(json.dumps(res[0] if len(res) == 1 else res, indent=2, sort_keys=True))
    return EXIT_OK if worst <= args.tol else EXIT_FAIL


def cmd_hist(args):
    from .quant import activation_histogram

    g = _load(args)
    try:
        g.node(args.layer)
    except KeyError:
        raise CliError(EXIT_USAGE, f"no layer {args.layer!r} in model") from None
    h = activation_histogram(g, args.layer, _calib_batches(args, g), args.bins)
    print(json.dumps({"layer": args.layer, "counts": h.counts.tolist(),
                      "edges": h.edges.tolist(), "spread": h.spread}, sort_keys=True))


# ------------------------------------------------------------------- parser
def build_parser():
    p = _Parser(prog="repdet", description="Re-parameterizable detector toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; explicit flags override it")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", "--output", dest="out", help="report output path")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--model", help="graph manifest (JSON)")
    model.add_argument("--weights", help="tensor blob")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--images", nargs="*", help="calibration images (P6 PPM)")
    data.add_argument("--num-calib", type=int, default=4, help="synthetic images if no --images")
    data.add_argument("--size", type=int, default=64)
    data.add_argument("--border", type=int, default=0)

    quant = argparse.ArgumentParser(add_help=False)
    quant.add_argument("--params", help="calibration params JSON (calibrate inline if absent)")
    quant.add_argument("--quant-method", choices=("minmax", "percentile"), default="minmax")
    quant.add_argument("--pct", type=float, default=99.99)
    quant.add_argument("--metric", choices=("mse", "snr", "cosine", "score"), default="mse")

    sub = p.add_subparsers(dest="subcommand", parser_class=_Parser, metavar="subcommand")
    subs = {}

    def add(name, fn, parents, help_):
        sp = sub.add_parser(name, parents=[common, *parents], help=help_)
        sp.set_defaults(func=fn)
        subs[name] = sp
        return sp

    sp = add("init", cmd_init, [model], "create a randomly initialised model")
    sp.add_argument("--preset", choices=("n", "t", "s", "m", "l"), default="n")
    sp.add_argument("--num-classes", type=int, default=80)
    sp.add_argument("--reg-max", type=int, default=-1, help="-1 picks the preset default")
    sp.add_argument("--no-head", action="store_true")

    sp = add("fuse", cmd_fuse, [model], "re-parameterize RepVGG blocks and fold BN")
    sp.add_argument("--out-model", required=True)
    sp.add_argument("--out-weights", required=True)

    sp = add("equiv", cmd_equiv, [model], "compare unfused and fused forwards")
    sp.add_argument("--fused-model")
    sp.add_argument("--fused-weights")
    sp.add_argument("--trials", type=int, default=10)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--size", type=int, default=64)

    sp = add("infer", cmd_infer, [model], "detect objects in a PPM image")
    sp.add_argument("--image", required=True)
    sp.add_argument("--conf", type=float, default=0.25)
    sp.add_argument("--iou", type=float, default=0.45)
    sp.add_argument("--size", type=int, default=640)
    sp.add_argument("--border", type=int, default=0)
    sp.add_argument("--max-det", type=int, default=100)

    add("calibrate", cmd_calibrate, [model, data, quant], "PTQ calibration")

    sp = add("sensitivity", cmd_sensitivity, [model, data, quant], "per-layer sensitivity scan")
    sp.add_argument("--out-json")
    sp.add_argument("--score", action="store_true", help="also measure the F1 score drop")

    sp = add("ptq", cmd_ptq, [model, data, quant], "partial post-training quantization")
    sp.add_argument("--top-k", type=int, default=6)
    sp.add_argument("--report", help="sensitivity report JSON")
    sp.add_argument("--out-model")
    sp.add_argument("--out-weights")

    sp = add("bench", cmd_bench, [model], "CPU latency benchmark")
    sp.add_argument("--batch", default="1")
    sp.add_argument("--iters", type=int, default=10)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--compare-fused", action="store_true")

    sp = add("sandbox", cmd_sandbox, [], "optimise the detection objective on a toy instance")
    for flag, typ, default in (("--num-classes", int, 1), ("--reg-max", int, 16),
                               ("--cls-kind", str, "vfl"), ("--reg-kind", str, "giou"),
                               ("--assigner", str, "tal"), ("--warmup-assigner", str, "none"),
                               ("--warmup-epochs", int, 0), ("--steps", int, 2000),
                               ("--lr", float, 0.5), ("--grid", int, 8), ("--stride", int, 8),
                               ("--num-gts", int, 1), ("--lambda-reg", float, 2.5),
                               ("--mu-obj", float, 1.0)):
        sp.add_argument(flag, type=typ, default=default)
    sp.add_argument("--use-obj", action="store_true")

    sp = add("gradcheck", cmd_gradcheck, [], "finite-difference check of loss gradients")
    sp.add_argument("--loss", default="all")
    sp.add_argument("--trials", type=int, default=1000)
    sp.add_argument("--h", type=float, default=1e-3)
    sp.add_argument("--tol", type=float, default=1e-4)

    sp = add("hist", cmd_hist, [model, data], "activation histogram of one layer")
    sp.add_argument("--layer", required=True)
    sp.add_argument("--bins", type=int, default=64)
    return p, subs


def _apply_config(argv, parser, subs):
    """Re-parse with config-file values installed as subcommand defaults."""
    from .config import ConfigError, load_kv, _coerce

    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    try:
        kv = load_kv(args.config)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot read config: {e}") from e
    except ConfigError as e:
        raise CliError(EXIT_USAGE, str(e)) from e
    sp = subs[args.subcommand]
    actions = {a.dest: a for a in sp._actions}
    defaults = {}
    for k, v in kv.items():
        if k not in actions or k in ("config", "help"):
            raise CliError(EXIT_USAGE, f"unknown config key {k!r} for {args.subcommand}")
        a = actions[k]
        if isinstance(a, argparse._StoreTrueAction):
            v = _coerce(v, False)
        elif a.nargs in ("*", "+"):
            v = v.split()
        elif a.type is not None:
            v = a.type(v)
        defaults[k] = v
    sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    from .graph import GraphError, ManifestError
    from .tensor import ShapeError

    parser, subs = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _apply_config(argv, parser, subs)
        if not args.subcommand:
            parser.print_usage(sys.stderr)
            _emit_error("usage", "missing subcommand")
            return EXIT_USAGE
        code = args.func(args)
        return EXIT_OK if code is None else code
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    except CliError as e:
        _emit_error("failure" if e.code == EXIT_FAIL else "error", str(e))
        return e.code
    except (ManifestError, GraphError, ShapeError) as e:
        _emit_error("model", str(e))
        return EXIT_MODEL
    except (OSError, ValueError) as e:
        # data-level problems (unreadable/garbled files) surface as I/O
        if isinstance(e, OSError) or "PPM" in str(e):
            _emit_error("io", str(e))
            return EXIT_IO
        _emit_error("usage", str(e))
        return EXIT_USAGE
    except KeyError as e:
        _emit_error("usage", f"unknown key {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
