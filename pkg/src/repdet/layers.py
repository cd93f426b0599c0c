"""Per-node parameter containers and single-node forward functions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (
    BatchNormParams,
    ConvSpec,
    ShapeError,
    activation,
    batch_norm_infer,
    conv2d,
)

BN_KEYS = ("gamma", "beta", "mean", "var")


def bn_to_params(prefix: str, bn: BatchNormParams) -> dict:
    return {
        f"{prefix}.gamma": bn.gamma,
        f"{prefix}.beta": bn.beta,
        f"{prefix}.mean": bn.running_mean,
        f"{prefix}.var": bn.running_var,
    }


def bn_from_params(prefix: str, params: dict, eps: float) -> Optional[BatchNormParams]:
    if f"{prefix}.gamma" not in params:
        return None
    return BatchNormParams(
        params[f"{prefix}.gamma"],
        params[f"{prefix}.beta"],
        params[f"{prefix}.mean"],
        params[f"{prefix}.var"],
        eps,
    )


@dataclass
class RepVGGBlockParams:
    """Train-time three-branch block: 3x3+BN, 1x1+BN and an optional identity BN."""

    conv3: ConvSpec
    bn3: BatchNormParams
    conv1: ConvSpec
    bn1: BatchNormParams
    id_bn: Optional[BatchNormParams] = None

    def __post_init__(self):
        c3, c1 = self.conv3, self.conv1
        if c3.kernel_size != 3 or c3.padding != 1:
            raise ShapeError("conv3 must be 3x3 with padding 1", "conv3")
        if c1.kernel_size != 1 or c1.padding != 0:
            raise ShapeError("conv1 must be 1x1 with padding 0", "conv1")
        if (c3.in_channels, c3.out_channels, c3.stride, c3.groups) != (
            c1.in_channels, c1.out_channels, c1.stride, c1.groups
        ):
            raise ShapeError("branches disagree on channels/stride/groups", "branches")
        wants_id = c3.in_channels == c3.out_channels and c3.stride == 1
        if (self.id_bn is not None) != wants_id:
            raise ShapeError(
                "identity branch present iff in_channels == out_channels and stride == 1",
                "id_bn",
            )

    @property
    def in_channels(self) -> int:
        return self.conv3.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv3.out_channels

    @property
    def stride(self) -> int:
        return self.conv3.stride

    @property
    def groups(self) -> int:
        return self.conv3.groups

    def to_params(self) -> dict:
        p = {"conv3.weight": self.conv3.weight, "conv1.weight": self.conv1.weight}
        p.update(bn_to_params("bn3", self.bn3))
        p.update(bn_to_params("bn1", self.bn1))
        if self.id_bn is not None:
            p.update(bn_to_params("idbn", self.id_bn))
        return p

    @classmethod
    def from_node(cls, attrs: dict, params: dict) -> "RepVGGBlockParams":
        s, g, eps = attrs["stride"], attrs.get("groups", 1), attrs.get("eps", 1e-5)
        return cls(
            ConvSpec(params["conv3.weight"], None, s, 1, g),
            bn_from_params("bn3", params, eps),
            ConvSpec(params["conv1.weight"], None, s, 0, g),
            bn_from_params("bn1", params, eps),
            bn_from_params("idbn", params, eps),
        )


def repvgg_block_forward(x: np.ndarray, p: RepVGGBlockParams, act: str = "relu",
                         slope: float = 0.1) -> np.ndarray:
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"block expects {p.in_channels} channels, got {x.shape[1]}", "channels")
    y = batch_norm_infer(conv2d(x, p.conv3), p.bn3) + batch_norm_infer(conv2d(x, p.conv1), p.bn1)
    if p.id_bn is not None:
        y = y + batch_norm_infer(x, p.id_bn)
    return activation(act, y, slope)


def conv_node_spec(attrs: dict, params: dict) -> ConvSpec:
    return ConvSpec(
        params["weight"],
        params.get("bias"),
        attrs.get("stride", 1),
        attrs.get("pad", 0),
        attrs.get("groups", 1),
    )


def conv_node_forward(x: np.ndarray, attrs: dict, params: dict) -> np.ndarray:
    y = conv2d(x, conv_node_spec(attrs, params))
    bn = bn_from_params("bn", params, attrs.get("eps", 1e-5))
    if bn is not None:
        y = batch_norm_infer(y, bn)
    return activation(attrs.get("act", "none"), y, attrs.get("slope", 0.1))
