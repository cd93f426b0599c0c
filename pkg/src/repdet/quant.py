"""Simulated INT8: calibration, fake quantizers, graph PTQ and sensitivity analysis.

Weights are quantized symmetrically per output channel, activations
symmetrically per tensor on each conv's post-activation output.  Rounding is
half-to-even everywhere (``np.round``).
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .graph import ModelGraph, NodeSpec, forward
from .reparam import is_fused

SCALE_FLOOR = 1e-8
SNR_CAP_DB = 200.0
METRICS = ("mse", "snr", "cosine", "score")


class CalibrationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class QuantParams:
    scale: object  # float, or (C,) per-channel along axis 0
    zero_point: int = 0
    bits: int = 8
    symmetric: bool = True

    def __post_init__(self):
        s = np.asarray(self.scale, np.float64)
        if s.ndim > 1 or s.size == 0 or not np.all(np.isfinite(s)) or np.any(s <= 0):
            raise ValueError("scale must be a positive finite scalar or vector")
        object.__setattr__(self, "scale", float(s) if s.ndim == 0 else s)
        if self.bits < 2:
            raise ValueError("bits must be >= 2")
        if self.symmetric and self.zero_point != 0:
            raise ValueError("symmetric quantization requires zero_point == 0")
        if not self.qmin <= self.zero_point <= self.qmax:
            raise ValueError("zero_point outside the representable range")

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def per_channel(self) -> bool:
        return np.ndim(self.scale) == 1

    def _scale_for(self, x: np.ndarray):
        if not self.per_channel:
            return self.scale
        if x.shape[0] != self.scale.size:
            raise ValueError(f"{self.scale.size} channel scales for leading dim {x.shape[0]}")
        return self.scale.reshape((-1,) + (1,) * (x.ndim - 1))

    def to_dict(self) -> dict:
        s = self.scale.tolist() if self.per_channel else self.scale
        return {"scale": s, "zero_point": self.zero_point, "bits": self.bits,
                "symmetric": self.symmetric}


def fake_quantize(x, q: QuantParams) -> np.ndarray:
    """``clamp(round(x / s) + z, qmin, qmax) - z) * s`` in the dtype of ``x``."""
    x = np.asarray(x)
    dtype = x.dtype if x.dtype.kind == "f" else np.float64
    s = q._scale_for(x)
    k = np.clip(np.round(x / s) + q.zero_point, q.qmin, q.qmax) - q.zero_point
    return (k * s).astype(dtype, copy=False)


def fake_quantize_grad(x, q: QuantParams, upstream) -> np.ndarray:
    """Straight-through estimator: pass gradients inside the clip range, zero outside."""
    x = np.asarray(x)
    s = q._scale_for(x)
    lo, hi = (q.qmin - q.zero_point) * s, (q.qmax - q.zero_point) * s
    return np.where((x >= lo) & (x <= hi), upstream, 0.0)


def _abs_max(a: np.ndarray, axis=None):
    return np.max(np.abs(a), axis=axis) if a.size else 0.0


def _make_scale(amax, qmax: int):
    s = np.asarray(amax, np.float64) / qmax
    if np.any(s < SCALE_FLOOR):
        warnings.warn("all-zero calibration range; scale floored at 1e-8", CalibrationWarning,
                      stacklevel=3)
        s = np.maximum(s, SCALE_FLOOR)
    return s


def calibrate_tensor(samples, method: str = "minmax", pct: float = 99.99,
                     bits: int = 8) -> QuantParams:
    """Symmetric per-tensor params from one array or an iterable of arrays."""
    if isinstance(samples, np.ndarray):
        samples = [samples]
    arrs = [np.asarray(s, np.float64).ravel() for s in samples]
    if not arrs:
        raise ValueError("calibration needs at least one sample")
    qmax = 2 ** (bits - 1) - 1
    if method == "minmax":
        amax = max(float(_abs_max(a)) for a in arrs)
    elif method == "percentile":
        if not 50 < pct <= 100:
            raise ValueError("pct must lie in (50, 100]")
        amax = float(np.percentile(np.abs(np.concatenate(arrs)), pct))
    else:
        raise ValueError(f"unknown calibration method {method!r}")
    return QuantParams(float(_make_scale(amax, qmax)), 0, bits)


def weight_params(weight, bits: int = 8) -> QuantParams:
    """Per-output-channel symmetric scales from the stored weight."""
    w = np.asarray(weight, np.float64)
    amax = _abs_max(w.reshape(w.shape[0], -1), axis=1)
    return QuantParams(_make_scale(amax, 2 ** (bits - 1) - 1), 0, bits)


@dataclass(frozen=True)
class LayerQuant:
    weight: QuantParams
    act: QuantParams


def params_to_json(params: dict) -> str:
    return json.dumps({k: {"weight": v.weight.to_dict(), "act": v.act.to_dict()}
                       for k, v in params.items()}, indent=2, sort_keys=True)


def params_from_json(text: str) -> dict:
    raw = json.loads(text)
    return {k: LayerQuant(QuantParams(**v["weight"]), QuantParams(**v["act"]))
            for k, v in raw.items()}


def quantizable_layers(g: ModelGraph) -> list:
    return [n.id for n in g.nodes if n.kind == "conv" and not n.attrs.get("quantized")]


def _require_fused(g: ModelGraph):
    if not is_fused(g):
        raise ValueError("graph still has RepVGG blocks or unfolded BN; run "
                         "repdet.reparam.fuse_graph (CLI: repdet fuse) first")


def _batches(calib_inputs):
    if isinstance(calib_inputs, np.ndarray):
        calib_inputs = [calib_inputs]
    batches = list(calib_inputs)
    if not batches:
        raise ValueError("calibration set is empty")
    return batches


def calibrate_graph(g: ModelGraph, calib_inputs, method: str = "minmax", pct: float = 99.99,
                    bits: int = 8) -> dict:
    """``{layer_id: LayerQuant}`` for every conv of a fused graph."""
    _require_fused(g)
    batches = _batches(calib_inputs)
    layers = quantizable_layers(g)
    observed = {k: [] for k in layers}
    for x in batches:
        vals = forward(g, x, keep_all=True)
        for k in layers:
            observed[k].append(vals[k])
    return {k: LayerQuant(weight_params(g.node(k).params["weight"], bits),
                          calibrate_tensor(observed[k], method, pct, bits))
            for k in layers}


def quantize_graph(g: ModelGraph, params: dict, skip: Iterable = ()) -> ModelGraph:
    """Fake-quantize weights and outputs of every conv not in ``skip``.

    A quantized conv ``L`` becomes ``L/conv`` (weights fake-quantized in place)
    followed by a ``fakequant`` node that keeps the id ``L``, so consumers and
    graph outputs are untouched.
    """
    skip = set(skip)
    unknown = skip - set(quantizable_layers(g))
    if unknown:
        raise KeyError(f"skip list names non-quantizable layers {sorted(unknown)}")
    nodes = []
    for n in g.nodes:
        if n.kind != "conv" or n.id in skip or n.attrs.get("quantized"):
            nodes.append(n)
            continue
        if n.id not in params:
            raise KeyError(f"no quantization params for layer {n.id!r}")
        lq = params[n.id]
        w = n.params["weight"]
        qparams = dict(n.params, weight=fake_quantize(w, lq.weight))
        nodes.append(NodeSpec(n.id + "/conv", "conv", n.inputs,
                              {**n.attrs, "quantized": True}, qparams))
        nodes.append(NodeSpec(n.id, "fakequant", (n.id + "/conv",),
                              {"scale": lq.act.scale, "zero_point": lq.act.zero_point,
                               "bits": lq.act.bits}))
    return ModelGraph(nodes, g.outputs, {**g.meta, "quantized": True})


# ---------------------------------------------------------------- sensitivity
def _metrics(ref: np.ndarray, q: np.ndarray) -> dict:
    ref = ref.astype(np.float64).ravel()
    q = q.astype(np.float64).ravel()
    noise = q - ref
    ns, ss = float(noise @ noise), float(ref @ ref)
    mse = ns / ref.size
    snr = SNR_CAP_DB if ns == 0 else min(SNR_CAP_DB, 10 * math.log10(max(ss, 1e-300) / ns))
    nr, nq = math.sqrt(ss), math.sqrt(float(q @ q))
    if nr == 0 or nq == 0:
        cos = 1.0 if nr == nq else 0.0
    else:
        cos = min(1.0, float(ref @ q) / (nr * nq))
    return {"mse": mse, "snr": snr, "cosine": cos}


def _rank(values: list, most_sensitive_high: bool) -> list:
    order = sorted(range(len(values)),
                   key=lambda i: (-values[i] if most_sensitive_high else values[i], i))
    ranks = [0] * len(values)
    for r, i in enumerate(order, 1):
        ranks[i] = r
    return ranks


@dataclass
class SensitivityReport:
    layers: list
    mse: list
    snr: list
    cosine: list
    score_delta: list
    ranks: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.ranks:
            self.ranks = {"mse": _rank(self.mse, True), "snr": _rank(self.snr, False),
                          "cosine": _rank(self.cosine, False),
                          "score": _rank(self.score_delta, True)}

    def top(self, metric: str = "mse", k: int = 6) -> list:
        if metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        r = self.ranks[metric]
        return [self.layers[i] for i in sorted(range(len(r)), key=r.__getitem__)[:k]]

    def rows(self) -> list:
        return [{"layer_id": L, "mse": self.mse[i], "snr_db": self.snr[i],
                 "cosine": self.cosine[i], "score_delta": self.score_delta[i],
                 "rank_mse": self.ranks["mse"][i], "rank_snr": self.ranks["snr"][i],
                 "rank_cos": self.ranks["cosine"][i], "rank_score": self.ranks["score"][i]}
                for i, L in enumerate(self.layers)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = self.rows()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else ["layer_id"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"layers": self.rows()}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SensitivityReport":
        rows = json.loads(text)["layers"]
        ranks = {m: [r[f"rank_{k}"] for r in rows]
                 for m, k in (("mse", "mse"), ("snr", "snr"), ("cosine", "cos"),
                              ("score", "score"))}
        return cls([r["layer_id"] for r in rows], [r["mse"] for r in rows],
                   [r["snr_db"] for r in rows], [r["cosine"] for r in rows],
                   [r["score_delta"] for r in rows], ranks)


def sensitivity_scan(g: ModelGraph, params: dict, calib_inputs,
                     evaluator: Optional[Callable[[ModelGraph], float]] = None) -> SensitivityReport:
    """Quantize one layer at a time and measure its output map against float.

    ``evaluator`` maps a graph to a detection score; ``score_delta`` is the drop
    caused by quantizing only that layer (0 for every layer when omitted).
    """
    _require_fused(g)
    batches = _batches(calib_inputs)
    layers = quantizable_layers(g)
    float_vals = [forward(g, x, keep_all=True) for x in batches]
    base_score = evaluator(g) if evaluator else 0.0
    out = {"mse": [], "snr": [], "cosine": [], "score": []}
    for L in layers:
        qg = quantize_graph(g, params, skip=[k for k in layers if k != L])
        ref, got = [], []
        for x, fv in zip(batches, float_vals):
            got.append(forward(qg, x, keep_all=True)[L].ravel())
            ref.append(fv[L].ravel())
        m = _metrics(np.concatenate(ref), np.concatenate(got))
        for k in ("mse", "snr", "cosine"):
            out[k].append(m[k])
        out["score"].append(base_score - evaluator(qg) if evaluator else 0.0)
    return SensitivityReport(layers, out["mse"], out["snr"], out["cosine"], out["score"])


def partial_quantize(g: ModelGraph, params: dict, report: SensitivityReport,
                     float_top_k: int = 6, metric: str = "mse") -> ModelGraph:
    """Quantize everything except the ``float_top_k`` most sensitive layers."""
    if float_top_k < 0:
        raise ValueError("float_top_k must be >= 0")
    if set(report.layers) != set(quantizable_layers(g)):
        raise ValueError("report does not cover this graph's layers")
    if float_top_k >= len(report.layers):
        warnings.warn("float_top_k covers every layer; graph stays fully float", stacklevel=2)
    return quantize_graph(g, params, skip=report.top(metric, float_top_k))


def output_error(g_ref: ModelGraph, g_test: ModelGraph, inputs) -> float:
    """Max-abs difference over all graph outputs and input batches."""
    worst = 0.0
    for x in _batches(inputs):
        a, b = forward(g_ref, x), forward(g_test, x)
        for k in a:
            worst = max(worst, float(np.max(np.abs(a[k].astype(np.float64) - b[k]))))
    return worst


def output_mse(g_ref: ModelGraph, g_test: ModelGraph, inputs) -> float:
    tot, n = 0.0, 0
    for x in _batches(inputs):
        a, b = forward(g_ref, x), forward(g_test, x)
        for k in a:
            d = a[k].astype(np.float64) - b[k]
            tot += float((d * d).sum())
            n += d.size
    return tot / max(n, 1)


# ------------------------------------------------------------------------ CWD
def cwd_loss(teacher_fm, student_fm, temperature: float = 1.0):
    """Channel-wise distillation: KL between per-channel spatial softmaxes.

    Summed over channels, averaged over the batch, scaled by T^2.  Returns
    ``(loss, dloss/dstudent)``; the teacher is constant.
    """
    t = np.asarray(teacher_fm, np.float64)
    s = np.asarray(student_fm, np.float64)
    if t.shape != s.shape or t.ndim != 4:
        raise ValueError(f"feature maps must share one NCHW shape, got {t.shape} vs {s.shape}")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    T = temperature
    n, c = t.shape[:2]
    zt, zs = t.reshape(n, c, -1) / T, s.reshape(n, c, -1) / T
    lt = zt - zt.max(-1, keepdims=True)
    lt = lt - np.log(np.exp(lt).sum(-1, keepdims=True))
    ls = zs - zs.max(-1, keepdims=True)
    ls = ls - np.log(np.exp(ls).sum(-1, keepdims=True))
    pt, ps = np.exp(lt), np.exp(ls)
    loss = T * T * float((pt * (lt - ls)).sum()) / n
    grad = (T * (ps - pt) / n).reshape(s.shape)
    return loss, grad


# ------------------------------------------------------------------ histograms
@dataclass
class Histogram:
    counts: np.ndarray
    edges: np.ndarray

    @property
    def occupied(self) -> int:
        return int((self.counts > 0).sum())

    @property
    def spread(self) -> float:
        """Width of the occupied value range."""
        idx = np.nonzero(self.counts)[0]
        return float(self.edges[idx[-1] + 1] - self.edges[idx[0]]) if idx.size else 0.0


def activation_histogram(g: ModelGraph, layer_id: str, inputs, bins: int = 64,
                         value_range=None) -> Histogram:
    g.node(layer_id)
    vals = np.concatenate([forward(g, x, keep_all=True)[layer_id].ravel()
                           for x in _batches(inputs)]).astype(np.float64)
    counts, edges = np.histogram(vals, bins=bins, range=value_range)
    return Histogram(counts, edges)


# ------------------------------------------------------ constructed test model
def pathological_model(calib: np.ndarray, depth: int = 10, channels: int = 8, bad_layer: int = 4,
                       outlier: float = 60.0, amplification: float = 3e4, seed: int = 0,
                       bad_bn_eps: float = 1e-9, quiet: float = 1e-2) -> ModelGraph:
    """Plain conv+BN+ReLU chain with one layer whose BN fold amplifies a channel.

    On layer ``bad_layer``, channel 0 gets ``var = 0`` with a tiny eps, so the
    fold multiplies its weights by ``amplification``; its running mean is put in
    the upper tail of that channel's pre-BN values on ``calib`` so the folded
    output is a sparse outlier of height about ``outlier`` after ReLU.  Per-tensor
    activation scales for that layer are then dominated by the outlier.

    The channel's pre-fold weights are first scaled by ``quiet``, the way a
    collapsed variance arises from pre-activations that barely move.  Without
    it the fold would also amplify quantization noise arriving from upstream.
    """
    from .blocks import GraphBuilder

    b = GraphBuilder(seed, gain=math.sqrt(2.0), dtype=np.float64)
    b.input("x", calib.shape[1])
    src = "x"
    for i in range(depth):
        src = b.conv(f"l{i}", src, channels, 3, 1, "relu")
    g = b.build([src])
    node = g.node(f"l{bad_layer}")
    p = {k: np.array(v) for k, v in node.params.items()}
    p["weight"][0] *= quiet
    node = node.replace(params=p)
    pre = forward(g, calib, keep_all=True)[node.inputs[0]]
    from .tensor import conv2d
    from .layers import conv_node_spec

    y = conv2d(pre, conv_node_spec(node.attrs, node.params))[:, 0].ravel()
    ymax = float(y.max())
    gamma = amplification * math.sqrt(bad_bn_eps)
    p["bn.gamma"][0] = gamma
    p["bn.beta"][0] = 0.0
    p["bn.var"][0] = 0.0
    p["bn.mean"][0] = ymax - outlier / amplification
    bad = node.replace(params=p, attrs={**node.attrs, "eps": bad_bn_eps})
    nodes = [bad if n.id == node.id else n for n in g.nodes]
    return ModelGraph(nodes, g.outputs, {**g.meta, "pathological_layer": node.id})
