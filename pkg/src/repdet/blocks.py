"""Graph constructors for the detector: RepVGG/RepBlock stacks, CSPStackRep
blocks, the EfficientRep backbone, the Rep-PAN neck and the decoupled head.

All constructors append nodes to a :class:`GraphBuilder`; the public
``build_*`` functions wrap them into standalone graphs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .graph import ModelGraph, NodeSpec
from .layers import RepVGGBlockParams, bn_from_params, conv_node_spec, repvgg_block_forward
from .rng import SplitMix64, make_rng
from .tensor import ShapeError, activation, batch_norm_infer, concat_channels, conv2d

BLOCK_STYLES = ("rep_block", "csp_stackrep")


@dataclass(frozen=True)
class BlockConfig:
    block_style: str
    channel_coeff: Fraction = Fraction(1, 2)
    depth: int = 1
    width: int = 64

    def __post_init__(self):
        if self.block_style not in BLOCK_STYLES:
            raise ValueError(f"block_style must be one of {BLOCK_STYLES}")
        cc = Fraction(self.channel_coeff).limit_denominator(1000)
        object.__setattr__(self, "channel_coeff", cc)
        if not 0 < cc <= 1:
            raise ValueError("channel_coeff must lie in (0, 1]")
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be positive")
        if self.hidden < 1:
            raise ValueError(f"hidden width {self.channel_coeff}*{self.width} rounds below 1")

    @property
    def hidden(self) -> int:
        return int(round(self.channel_coeff * self.width))


class GraphBuilder:
    """Accumulates nodes with randomly initialised parameters.

    Convolution weights are drawn N(0, gain^2 / fan_in); batch-norm statistics
    are randomised so that fusion tests exercise non-trivial folds.
    """

    def __init__(self, seed: int = 0, gain: float = 1.0, dtype=np.float32):
        self.rng: SplitMix64 = make_rng(seed, "graph-builder")
        self.gain = gain
        self.dtype = dtype
        self.nodes: list = []
        self._ids: set = set()
        self.channels: dict = {}

    # -- primitives -------------------------------------------------------
    def _add(self, node: NodeSpec, channels: int) -> str:
        if node.id in self._ids:
            raise ValueError(f"duplicate node id {node.id}")
        self._ids.add(node.id)
        self.nodes.append(node)
        self.channels[node.id] = channels
        return node.id

    def _weight(self, out: int, cin_g: int, k: int, gain: Optional[float] = None):
        g = self.gain if gain is None else gain
        std = g / math.sqrt(cin_g * k * k)
        return self.rng.normal(0.0, std, (out, cin_g, k, k)).astype(self.dtype)

    def _bn(self, prefix: str, c: int) -> dict:
        r = self.rng
        return {
            f"{prefix}.gamma": r.uniform(0.5, 1.2, c).astype(self.dtype),
            f"{prefix}.beta": r.normal(0.0, 0.1, c).astype(self.dtype),
            f"{prefix}.mean": r.normal(0.0, 0.1, c).astype(self.dtype),
            f"{prefix}.var": r.uniform(0.5, 1.5, c).astype(self.dtype),
        }

    def input(self, node_id: str, channels: int) -> str:
        return self._add(NodeSpec(node_id, "input", (), {"channels": channels}), channels)

    def conv(self, node_id: str, src: str, out: int, k: int = 1, stride: int = 1,
             act: str = "relu", bn: bool = True, bias: bool = False, groups: int = 1) -> str:
        cin = self.channels[src]
        params = {"weight": self._weight(out, cin // groups, k)}
        if bias:
            params["bias"] = self.rng.normal(0.0, 0.1, out).astype(self.dtype)
        if bn:
            params.update(self._bn("bn", out))
        attrs = {"stride": stride, "pad": k // 2, "groups": groups, "act": act, "eps": 1e-5}
        return self._add(NodeSpec(node_id, "conv", (src,), attrs, params), out)

    def repvgg(self, node_id: str, src: str, out: int, stride: int = 1, act: str = "relu",
               groups: int = 1) -> str:
        cin = self.channels[src]
        # three summed branches: shrink each so the block roughly preserves scale
        g = self.gain / math.sqrt(3.0)
        params = {"conv3.weight": self._weight(out, cin // groups, 3, g),
                  "conv1.weight": self._weight(out, cin // groups, 1, g)}
        params.update(self._bn("bn3", out))
        params.update(self._bn("bn1", out))
        if cin == out and stride == 1:
            params.update(self._bn("idbn", out))
            params["idbn.gamma"] = params["idbn.gamma"] * self.dtype(0.5)
        attrs = {"stride": stride, "groups": groups, "act": act, "eps": 1e-5}
        return self._add(NodeSpec(node_id, "repvgg_block", (src,), attrs, params), out)

    def add(self, node_id: str, *srcs: str) -> str:
        return self._add(NodeSpec(node_id, "add", srcs), self.channels[srcs[0]])

    def concat(self, node_id: str, *srcs: str) -> str:
        return self._add(NodeSpec(node_id, "concat", srcs),
                         sum(self.channels[s] for s in srcs))

    def upsample(self, node_id: str, src: str) -> str:
        return self._add(NodeSpec(node_id, "upsample", (src,)), self.channels[src])

    def maxpool(self, node_id: str, src: str, k: int = 5) -> str:
        return self._add(NodeSpec(node_id, "maxpool", (src,), {"k": k, "stride": 1, "pad": k // 2}),
                         self.channels[src])

    # -- composites -------------------------------------------------------
    def rep_block(self, prefix: str, src: str, out: int, n: int, act: str = "relu") -> str:
        """RepBlock: ``n`` stacked RepVGG blocks (first one maps channels)."""
        x = src
        for i in range(n):
            x = self.repvgg(f"{prefix}.{i}", x, out, 1, act)
        return x

    def csp_stackrep(self, prefix: str, src: str, cfg: BlockConfig, act: str = "relu") -> str:
        """CSPStackRep: 1x1 split into a residual double-RepVGG stack and a 1x1
        shortcut, concatenated and projected by a third 1x1."""
        h = cfg.hidden
        a = self.conv(f"{prefix}.cv1", src, h, 1, act=act)
        b = self.conv(f"{prefix}.cv2", src, h, 1, act=act)
        x = a
        for i in range(cfg.depth):
            r1 = self.repvgg(f"{prefix}.m{i}.0", x, h, 1, act)
            r2 = self.repvgg(f"{prefix}.m{i}.1", r1, h, 1, act)
            x = self.add(f"{prefix}.m{i}.add", r2, x)
        cat = self.concat(f"{prefix}.cat", x, b)
        return self.conv(f"{prefix}.cv3", cat, cfg.width, 1, act=act)

    def stage_block(self, prefix: str, src: str, out: int, depth: int, style: str,
                    cc, act: str) -> str:
        if style == "rep_block":
            return self.rep_block(prefix, src, out, depth, act)
        return self.csp_stackrep(prefix, src, BlockConfig("csp_stackrep", cc, depth, out), act)

    def sppf(self, prefix: str, src: str, act: str = "relu", k: int = 5) -> str:
        c = self.channels[src]
        x = self.conv(f"{prefix}.cv1", src, max(c // 2, 1), 1, act=act)
        y1 = self.maxpool(f"{prefix}.pool1", x, k)
        y2 = self.maxpool(f"{prefix}.pool2", y1, k)
        y3 = self.maxpool(f"{prefix}.pool3", y2, k)
        cat = self.concat(f"{prefix}.cat", x, y1, y2, y3)
        return self.conv(f"{prefix}.cv2", cat, c, 1, act=act)

    def build(self, outputs, meta=None) -> ModelGraph:
        return ModelGraph(self.nodes, tuple(outputs), meta or {})


# ------------------------------------------------------------ direct forwards
@dataclass
class CSPStackRepParams:
    cv1: tuple  # (ConvSpec, BatchNormParams | None)
    cv2: tuple
    cv3: tuple
    pairs: list = field(default_factory=list)  # [(RepVGGBlockParams, RepVGGBlockParams)]

    @classmethod
    def from_graph(cls, graph: ModelGraph, prefix: str) -> "CSPStackRepParams":
        def conv(name):
            n = graph.node(f"{prefix}.{name}")
            return conv_node_spec(n.attrs, n.params), bn_from_params("bn", n.params, 1e-5)

        pairs = []
        i = 0
        while True:
            try:
                n0, n1 = graph.node(f"{prefix}.m{i}.0"), graph.node(f"{prefix}.m{i}.1")
            except KeyError:
                break
            pairs.append((RepVGGBlockParams.from_node(n0.attrs, n0.params),
                          RepVGGBlockParams.from_node(n1.attrs, n1.params)))
            i += 1
        return cls(conv("cv1"), conv("cv2"), conv("cv3"), pairs)


def _conv_bn_act(x, conv_bn, act):
    spec, bn = conv_bn
    y = conv2d(x, spec)
    if bn is not None:
        y = batch_norm_infer(y, bn)
    return activation(act, y)


def csp_stackrep_forward(x: np.ndarray, cfg: BlockConfig, params: CSPStackRepParams,
                         act: str = "relu") -> np.ndarray:
    if cfg.block_style != "csp_stackrep":
        raise ValueError("csp_stackrep_forward needs block_style='csp_stackrep'")
    if len(params.pairs) != cfg.depth:
        raise ShapeError(f"{len(params.pairs)} sub-blocks for depth {cfg.depth}", "depth")
    a = _conv_bn_act(x, params.cv1, act)
    b = _conv_bn_act(x, params.cv2, act)
    for p0, p1 in params.pairs:
        a = repvgg_block_forward(repvgg_block_forward(a, p0, act), p1, act) + a
    return _conv_bn_act(concat_channels(a, b), params.cv3, act)


# ------------------------------------------------------------------ builders
def add_backbone(b: GraphBuilder, src: str, widths, depths, style: str = "rep_block",
                 cc=Fraction(1, 2), act: str = "relu", sppf: bool = True, prefix="backbone"):
    """Append EfficientRep; returns the (C3, C4, C5) node ids at strides 8/16/32."""
    if len(widths) != 5 or len(depths) != 5:
        raise ValueError("EfficientRep needs 5 stages (stem + 4): widths and depths of length 5")
    if style not in BLOCK_STYLES:
        raise ValueError(f"unknown block style {style!r}")
    x = b.repvgg(f"{prefix}.stem", src, widths[0], 2, act)
    feats = []
    for i in range(1, 5):
        x = b.repvgg(f"{prefix}.s{i}.down", x, widths[i], 2, act)
        x = b.stage_block(f"{prefix}.s{i}.blk", x, widths[i], depths[i], style, cc, act)
        if i == 4 and sppf:
            x = b.sppf(f"{prefix}.sppf", x, act)
        feats.append(x)
    return tuple(feats[1:])


def add_neck(b: GraphBuilder, c3: str, c4: str, c5: str, widths, depths,
             style: str = "rep_block", cc=Fraction(1, 2), act: str = "relu", prefix="neck"):
    """Append Rep-PAN.  ``widths`` = (reduce0, reduce1, down2, p4_out, down1, p5_out)
    where P3 has width reduce1; ``depths`` = 4 block depths (p4, p3, n3, n4)."""
    if len(widths) != 6 or len(depths) != 4:
        raise ValueError("Rep-PAN needs 6 widths and 4 depths")
    r0, r1, d2, w4, d1, w5 = widths
    f0 = b.conv(f"{prefix}.reduce0", c5, r0, 1, act=act)
    u0 = b.upsample(f"{prefix}.up0", f0)
    t4 = b.stage_block(f"{prefix}.p4", b.concat(f"{prefix}.cat_p4", u0, c4), r0, depths[0],
                       style, cc, act)
    f1 = b.conv(f"{prefix}.reduce1", t4, r1, 1, act=act)
    u1 = b.upsample(f"{prefix}.up1", f1)
    p3 = b.stage_block(f"{prefix}.p3", b.concat(f"{prefix}.cat_p3", u1, c3), r1, depths[1],
                       style, cc, act)
    dn2 = b.conv(f"{prefix}.down2", p3, d2, 3, 2, act=act)
    p4 = b.stage_block(f"{prefix}.n3", b.concat(f"{prefix}.cat_n3", dn2, f1), w4, depths[2],
                       style, cc, act)
    dn1 = b.conv(f"{prefix}.down1", p4, d1, 3, 2, act=act)
    p5 = b.stage_block(f"{prefix}.n4", b.concat(f"{prefix}.cat_n4", dn1, f0), w5, depths[3],
                       style, cc, act)
    return p3, p4, p5


def add_head(b: GraphBuilder, feats, num_classes: int, reg_max: int, hybrid: bool = True,
             act: str = "relu", strides=(8, 16, 32), prefix="head"):
    """Append the decoupled head; returns per-level ``(cls_id, reg_id, stride)``."""
    if num_classes < 1 or reg_max < 0:
        raise ValueError("num_classes >= 1 and reg_max >= 0 required")
    reg_ch = 4 * (reg_max + 1) if reg_max > 0 else 4
    n_mid = 1 if hybrid else 2
    levels = []
    for lvl, (f, s) in enumerate(zip(feats, strides)):
        c = b.channels[f]
        p = f"{prefix}.l{lvl}"
        stem = b.conv(f"{p}.stem", f, c, 1, act=act)
        xc = xr = stem
        for j in range(n_mid):
            xc = b.conv(f"{p}.cls_conv{j}", xc, c, 3, act=act)
            xr = b.conv(f"{p}.reg_conv{j}", xr, c, 3, act=act)
        cls = b.conv(f"{p}.cls_pred", xc, num_classes, 1, act="none", bn=False, bias=True)
        reg = b.conv(f"{p}.reg_pred", xr, reg_ch, 1, act="none", bn=False, bias=True)
        levels.append({"cls": cls, "reg": reg, "stride": s})
    return levels


def build_efficientrep_backbone(widths=(16, 32, 64, 128, 256), depths=(1, 2, 4, 6, 2),
                                style="rep_block", cc=Fraction(1, 2), act="relu",
                                sppf=True, in_channels=3, seed=0) -> ModelGraph:
    b = GraphBuilder(seed)
    x = b.input("image", in_channels)
    outs = add_backbone(b, x, widths, depths, style, cc, act, sppf)
    return b.build(outs, {"kind": "backbone"})


def build_reppan_neck(in_widths=(64, 128, 256), widths=(64, 32, 32, 64, 64, 128),
                      depths=(4, 4, 4, 4), style="rep_block", cc=Fraction(1, 2), act="relu",
                      seed=0) -> ModelGraph:
    b = GraphBuilder(seed)
    c3, c4, c5 = (b.input(n, w) for n, w in zip(("C3", "C4", "C5"), in_widths))
    outs = add_neck(b, c3, c4, c5, widths, depths, style, cc, act)
    return b.build(outs, {"kind": "neck"})


def build_decoupled_head(num_classes=80, reg_max=16, widths=(32, 64, 128), hybrid=True,
                         act="relu", seed=0) -> ModelGraph:
    b = GraphBuilder(seed)
    feats = [b.input(n, w) for n, w in zip(("P3", "P4", "P5"), widths)]
    levels = add_head(b, feats, num_classes, reg_max, hybrid, act)
    outs = [x for lv in levels for x in (lv["cls"], lv["reg"])]
    return b.build(outs, {"kind": "head", "num_classes": num_classes, "reg_max": reg_max,
                          "levels": levels})


# ------------------------------------------------------------------- presets
_BASE_CH = (64, 128, 256, 512, 1024, 256, 128, 128, 256, 256, 512)
_BASE_REP = (1, 6, 12, 18, 6, 12, 12, 12, 12)


@dataclass(frozen=True)
class ScalePreset:
    name: str
    width_mult: float
    depth_mult: float
    style: str
    cc: Fraction = Fraction(1, 2)
    act: str = "relu"
    cls_loss: str = "vfl"
    reg_loss: str = "siou"
    use_dfl: bool = False

    def channels(self):
        return tuple(int(math.ceil(c * self.width_mult / 8) * 8) for c in _BASE_CH)

    def repeats(self):
        reps = [max(round(n * self.depth_mult), 1) if n > 1 else n for n in _BASE_REP]
        if self.style == "csp_stackrep":  # each sub-block holds two RepVGG blocks
            reps = [max(r // 2, 1) for r in reps]
        return tuple(reps)


# Editable layouts following the published width/depth multipliers; exact
# per-stage channels are not tabulated, so these are conventions.
PRESETS = {
    "n": ScalePreset("n", 0.25, 0.33, "rep_block"),
    "t": ScalePreset("t", 0.375, 0.33, "rep_block"),
    "s": ScalePreset("s", 0.50, 0.33, "rep_block", reg_loss="siou"),
    "m": ScalePreset("m", 0.75, 0.60, "csp_stackrep", Fraction(2, 3), reg_loss="giou",
                     use_dfl=True),
    "l": ScalePreset("l", 1.0, 1.0, "csp_stackrep", Fraction(1, 2), act="silu",
                     reg_loss="giou", use_dfl=True),
}


def build_model(preset="n", num_classes=80, reg_max=None, seed=0, hybrid=True,
                sppf=True, with_head=True, style=None, cc=None, gain=1.0,
                dtype=np.float32) -> ModelGraph:
    """Backbone + neck (+ head) as one graph.  Outputs are P3/P4/P5 without the
    head, otherwise ``cls``/``reg`` maps per level."""
    p = PRESETS[preset] if isinstance(preset, str) else preset
    style = style or p.style
    cc = p.cc if cc is None else cc
    if reg_max is None:
        reg_max = 16 if p.use_dfl else 0
    ch, rep = p.channels(), p.repeats()
    b = GraphBuilder(seed, gain=gain, dtype=dtype)
    x = b.input("image", 3)
    c3, c4, c5 = add_backbone(b, x, ch[:5], rep[:5], style, cc, p.act, sppf)
    neck_widths = (ch[5], ch[6], ch[7], ch[8], ch[9], ch[10])
    feats = add_neck(b, c3, c4, c5, neck_widths, rep[5:], style, cc, p.act)
    meta = {"kind": "detector" if with_head else "backbone+neck", "preset": p.name,
            "style": style}
    if not with_head:
        return b.build(feats, meta)
    levels = add_head(b, feats, num_classes, reg_max, hybrid, p.act)
    meta.update(num_classes=num_classes, reg_max=reg_max, levels=levels)
    return b.build([x for lv in levels for x in (lv["cls"], lv["reg"])], meta)


@dataclass
class HeadOutputs:
    """Per-level raw head maps: ``levels = [(cls_logits, reg_out, stride), ...]``."""

    levels: list
    reg_max: int
    num_classes: int

    def __post_init__(self):
        reg_ch = 4 * (self.reg_max + 1) if self.reg_max > 0 else 4
        for cls, reg, _ in self.levels:
            if cls.shape[2:] != reg.shape[2:]:
                raise ShapeError("cls and reg spatial dims differ", "spatial")
            if reg.shape[1] != reg_ch or cls.shape[1] != self.num_classes:
                raise ShapeError(f"reg channels {reg.shape[1]} != {reg_ch}", "channels")

    @classmethod
    def from_outputs(cls, graph: ModelGraph, outputs: dict) -> "HeadOutputs":
        m = graph.meta
        levels = [(outputs[lv["cls"]], outputs[lv["reg"]], lv["stride"]) for lv in m["levels"]]
        return cls(levels, m["reg_max"], m["num_classes"])
