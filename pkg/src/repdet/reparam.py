"""Structural re-parameterization and the gradient re-parameterization rule.

Fusion algebra (cross-correlation, zero padding): a 1x1 kernel with pad 0
equals the same kernel placed at the centre of a 3x3 with pad 1, an identity
map is a 3x3 kernel with a single centre 1 per channel, and BN after a conv
is a per-output-channel affine map that folds into weight and bias.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .graph import ModelGraph, NodeSpec
from .layers import RepVGGBlockParams, bn_from_params
from .tensor import BatchNormParams, ConvSpec, ShapeError

AMPLIFICATION_LIMIT = 1e-10  # var + eps below this folds with gain > 1e5


class FoldAmplificationWarning(UserWarning):
    """BN statistics with near-zero variance make the folded weights explode."""


@dataclass
class FusedConvParams:
    weight: np.ndarray  # (out, in/groups, 3, 3)
    bias: np.ndarray
    stride: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2:] != (3, 3):
            raise ShapeError("fused kernel must be 3x3", "weight")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("fused parameters are not finite")

    def as_conv(self) -> ConvSpec:
        return ConvSpec(self.weight, self.bias, self.stride, 1, self.groups)


def check_bn(bn: BatchNormParams) -> None:
    denom = bn.running_var + bn.eps
    if np.any(denom < AMPLIFICATION_LIMIT):
        bad = np.flatnonzero(denom < AMPLIFICATION_LIMIT).tolist()
        warnings.warn(f"channels {bad}: var+eps < {AMPLIFICATION_LIMIT:g}; folded weights "
                      "will be amplified by > 1e5", FoldAmplificationWarning, stacklevel=3)


def fold_bn(conv: ConvSpec, bn: BatchNormParams) -> ConvSpec:
    if bn.channels != conv.out_channels:
        raise ShapeError(f"bn has {bn.channels} channels, conv outputs {conv.out_channels}",
                         "channels")
    check_bn(bn)
    scale, shift = bn.scale_shift()
    w = conv.weight * scale.astype(conv.weight.dtype)[:, None, None, None]
    b = shift if conv.bias is None else shift + scale * conv.bias
    return ConvSpec(w, b.astype(conv.weight.dtype), conv.stride, conv.padding, conv.groups)


def pad_1x1_to_3x3(kernel: np.ndarray) -> np.ndarray:
    if kernel.ndim != 4 or kernel.shape[2:] != (1, 1):
        raise ShapeError(f"expected a 1x1 kernel, got {kernel.shape}", "kernel")
    return np.pad(kernel, ((0, 0), (0, 0), (1, 1), (1, 1)))


def identity_to_3x3(channels: int, groups: int = 1, dtype=np.float64) -> np.ndarray:
    if channels % groups:
        raise ValueError(f"channels={channels} not divisible by groups={groups}")
    per_group = channels // groups
    k = np.zeros((channels, per_group, 3, 3), dtype=dtype)
    k[np.arange(channels), np.arange(channels) % per_group, 1, 1] = 1
    return k


def fuse_repvgg_block(p: RepVGGBlockParams) -> FusedConvParams:
    f3 = fold_bn(p.conv3, p.bn3)
    f1 = fold_bn(p.conv1, p.bn1)
    w = f3.weight + pad_1x1_to_3x3(f1.weight)
    b = f3.bias + f1.bias
    if p.id_bn is not None:
        ident = identity_to_3x3(p.in_channels, p.groups, p.conv3.weight.dtype)
        fi = fold_bn(ConvSpec(ident, None, 1, 1, p.groups), p.id_bn)
        w = w + fi.weight
        b = b + fi.bias
    return FusedConvParams(w, b, p.stride, p.groups)


def _fuse_node(node: NodeSpec) -> NodeSpec:
    a = node.attrs
    if node.kind not in ("repvgg_block", "conv") or (
            node.kind == "conv" and "bn.gamma" not in node.params):
        return node
    # fold in float64, store in the graph's own precision
    dtype = next(iter(node.params.values())).dtype
    p = {k: v.astype(np.float64) for k, v in node.params.items()}
    if node.kind == "repvgg_block":
        fused = fuse_repvgg_block(RepVGGBlockParams.from_node(a, p))
        attrs = {"stride": fused.stride, "pad": 1, "groups": fused.groups,
                 "act": a.get("act", "relu"), "slope": a.get("slope", 0.1), "fused_from": "repvgg"}
        return NodeSpec(node.id, "conv", node.inputs, attrs,
                        {"weight": fused.weight.astype(dtype), "bias": fused.bias.astype(dtype)})
    spec = ConvSpec(p["weight"], p.get("bias"), a.get("stride", 1), a.get("pad", 0),
                    a.get("groups", 1))
    folded = fold_bn(spec, bn_from_params("bn", p, a.get("eps", 1e-5)))
    attrs = {k: v for k, v in a.items() if k != "eps"}
    return NodeSpec(node.id, "conv", node.inputs, attrs,
                    {"weight": folded.weight.astype(dtype), "bias": folded.bias.astype(dtype)})


def fuse_graph(g: ModelGraph) -> ModelGraph:
    """Replace every RepVGG block by its RepConv and fold BN into every conv.

    Node ids are preserved, so graph outputs and consumers are unchanged.
    Unknown or already-plain nodes pass through untouched.
    """
    nodes = [_fuse_node(n) for n in g.nodes]
    return ModelGraph(nodes, g.outputs, {**g.meta, "fused": True})


def is_fused(g: ModelGraph) -> bool:
    return not any(n.kind == "repvgg_block" or "bn.gamma" in n.params for n in g.nodes)



def op_count(g: ModelGraph) -> int:
    """Number of primitive kernels a forward executes (conv, bn, act, add, ...)."""
    total = 0
    for n in g.nodes:
        if n.kind == "input":
            continue
        if n.kind == "repvgg_block":
            has_id = "idbn.gamma" in n.params
            total += 2 + 2 + int(has_id) + (2 if has_id else 1) + 1  # convs, bns, id bn, adds, act
        elif n.kind == "conv":
            total += 1 + ("bn.gamma" in n.params) + (n.attrs.get("act", "none") != "none")
        else:
            total += 1
    return total


# --------------------------------------------------- gradient re-parameterization
BRANCH_KINDS = ("full", "center", "identity")


@dataclass
class GrConfig:
    """Constant per-channel branch scales of a CSLA block.

    ``scales[:, j]`` multiplies branch ``j``; ``branches[j]`` says how that
    branch's kernel embeds in the 3x3: a trainable full 3x3 (``full``), a
    trainable 1x1 at the centre (``center``) or a constant identity
    (``identity``).  Training the plain operator with gradients multiplied by
    :meth:`multiplier` reproduces plain SGD on the CSLA form.
    """

    scales: np.ndarray
    branches: Sequence[str] = ("full", "full")

    def __post_init__(self):
        self.scales = np.asarray(self.scales, dtype=np.float64)
        if self.scales.ndim == 1:
            self.scales = self.scales[None, :]
        if self.scales.shape[1] != len(self.branches):
            raise ValueError("one scale column per branch required")
        if any(b not in BRANCH_KINDS for b in self.branches):
            raise ValueError(f"branch kinds must be among {BRANCH_KINDS}")
        if not np.all(np.isfinite(self.scales)):
            raise ValueError("branch scales must be finite")
        trainable = [j for j, b in enumerate(self.branches) if b != "identity"]
        if np.any((self.scales[:, trainable] ** 2).sum(axis=1) <= 0):
            raise ValueError("sum of squared trainable scales must be > 0 per channel")

    @staticmethod
    def _mask(kind: str, shape) -> np.ndarray:
        m = np.zeros(shape[1:]) if kind == "center" else np.ones(shape[1:])
        if kind == "center":
            m[:, 1, 1] = 1.0
        return m

    def multiplier(self, weight_shape) -> np.ndarray:
        out = np.zeros(weight_shape)
        s = np.broadcast_to(self.scales, (weight_shape[0], self.scales.shape[1]))
        for j, kind in enumerate(self.branches):
            if kind == "identity":
                continue
            out += (s[:, j] ** 2)[:, None, None, None] * self._mask(kind, weight_shape)
        return out

    def equivalent_weight(self, branch_weights) -> np.ndarray:
        """Plain 3x3 kernel equal to the scaled sum of branch kernels; identity
        branches take ``None`` and contribute a centre-1 kernel."""
        total = None
        for j, (kind, w) in enumerate(zip(self.branches, branch_weights)):
            if kind == "identity":
                out_ch = next(b.shape[0] for b in branch_weights if b is not None)
                w = identity_to_3x3(out_ch, 1)
            elif kind == "center":
                w = pad_1x1_to_3x3(w)
            term = self.scales[:, j][:, None, None, None] * w
            total = term if total is None else total + term
        return total

    @classmethod
    def from_repvgg_block(cls, p: RepVGGBlockParams) -> "GrConfig":
        """Donor-block default: branch scales are the BN fold factors of the
        3x3 and 1x1 branches."""
        s3, _ = p.bn3.scale_shift()
        s1, _ = p.bn1.scale_shift()
        return cls(np.stack([s3, s1], axis=1), ("full", "center"))


def gr_step(weights: np.ndarray, grads: np.ndarray, gr: GrConfig, lr: float) -> np.ndarray:
    if weights.shape != grads.shape:
        raise ShapeError(f"weights {weights.shape} vs grads {grads.shape}", "grads")
    return weights - lr * gr.multiplier(weights.shape) * grads
