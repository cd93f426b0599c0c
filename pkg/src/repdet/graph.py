"""Immutable layer DAGs, their execution, validation and on-disk format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import layers
from .tensor import (
    BatchNormParams,
    ShapeError,
    activation,
    batch_norm_infer,
    concat_channels,
    maxpool2d,
    tensor_from_bytes,
    tensor_to_bytes,
    upsample2x_nearest,
)

NODE_KINDS = frozenset(
    {"input", "conv", "bn", "act", "repvgg_block", "add", "concat", "upsample",
     "maxpool", "fakequant"}
)
MANIFEST_FORMAT = "repdet-graph/1"


class GraphError(ValueError):
    """Structural or execution error; ``node`` names the offending node id."""

    def __init__(self, message: str, node: str = ""):
        super().__init__(f"[{node}] {message}" if node else message)
        self.node = node


@dataclass(frozen=True)
class NodeSpec:
    id: str
    kind: str
    inputs: tuple = ()
    attrs: Mapping = field(default_factory=dict)
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in NODE_KINDS:
            raise GraphError(f"unknown node kind {self.kind!r}", self.id)
        object.__setattr__(self, "inputs", tuple(self.inputs))
        frozen = {}
        for k, v in self.params.items():
            a = np.asarray(v)
            if a.flags.writeable:
                a = a.copy()
                a.flags.writeable = False
            frozen[k] = a
        object.__setattr__(self, "params", frozen)
        object.__setattr__(self, "attrs", dict(self.attrs))

    def replace(self, **changes) -> "NodeSpec":
        d = {"id": self.id, "kind": self.kind, "inputs": self.inputs,
             "attrs": self.attrs, "params": self.params}
        d.update(changes)
        return NodeSpec(**d)


@dataclass(frozen=True)
class ModelGraph:
    nodes: tuple
    outputs: tuple
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        object.__setattr__(self, "meta", dict(self.meta))
        seen = set()
        for n in self.nodes:
            if n.id in seen:
                raise GraphError("duplicate node id", n.id)
            for i in n.inputs:
                if i not in seen:
                    raise GraphError(f"input {i!r} not declared before consumer", n.id)
            seen.add(n.id)
        for o in self.outputs:
            if o not in seen:
                raise GraphError("output id does not exist", o)

    @property
    def inputs(self) -> tuple:
        return tuple(n.id for n in self.nodes if n.kind == "input")

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def consumers(self, node_id: str) -> list:
        return [n.id for n in self.nodes if node_id in n.inputs]

    def count(self, kind: str) -> int:
        return sum(n.kind == kind for n in self.nodes)

    def map_params(self, fn) -> "ModelGraph":
        nodes = [n.replace(params={k: fn(k, v) for k, v in n.params.items()}) for n in self.nodes]
        return ModelGraph(nodes, self.outputs, self.meta)


_NON_LEARNABLE = (".mean", ".var")


def param_count(graph: ModelGraph) -> int:
    """Learnable parameter count (BN running statistics excluded)."""
    return int(sum(
        v.size for n in graph.nodes for k, v in n.params.items() if not k.endswith(_NON_LEARNABLE)
    ))


def _exec_node(node: NodeSpec, args: list) -> np.ndarray:
    a = node.attrs
    kind = node.kind
    if kind == "conv":
        return layers.conv_node_forward(args[0], a, node.params)
    if kind == "repvgg_block":
        p = layers.RepVGGBlockParams.from_node(a, node.params)
        return layers.repvgg_block_forward(args[0], p, a.get("act", "relu"), a.get("slope", 0.1))
    if kind == "bn":
        p = node.params
        bn = BatchNormParams(p["gamma"], p["beta"], p["mean"], p["var"], a.get("eps", 1e-5))
        return batch_norm_infer(args[0], bn)
    if kind == "act":
        return activation(a["act"], args[0], a.get("slope", 0.1))
    if kind == "add":
        out = args[0]
        for t in args[1:]:
            if t.shape != out.shape:
                raise ShapeError(f"add of {out.shape} and {t.shape}", "shape")
            out = out + t
        return out
    if kind == "concat":
        return concat_channels(*args)
    if kind == "upsample":
        return upsample2x_nearest(args[0])
    if kind == "maxpool":
        return maxpool2d(args[0], a["k"], a.get("stride", 1), a.get("pad", 0))
    if kind == "fakequant":
        from .quant import QuantParams, fake_quantize

        q = QuantParams(a["scale"], a.get("zero_point", 0), a.get("bits", 8))
        return fake_quantize(args[0], q)
    raise GraphError(f"cannot execute kind {kind!r}", node.id)


def forward(graph: ModelGraph, x, dtype=None, keep_all: bool = False) -> dict:
    """Execute ``graph`` in declaration (topological) order.

    ``x`` is a single tensor for single-input graphs or a mapping from input
    node id to tensor.  Returns ``{output_id: tensor}``; with ``keep_all`` every
    intermediate value is returned as well.
    """
    input_ids = graph.inputs
    if not isinstance(x, Mapping):
        if len(input_ids) != 1:
            raise GraphError(f"graph has inputs {input_ids}; pass a mapping")
        x = {input_ids[0]: x}
    values = {}
    for node in graph.nodes:
        try:
            if node.kind == "input":
                if node.id not in x:
                    raise GraphError("no tensor supplied for input", node.id)
                v = np.asarray(x[node.id])
                if dtype is not None:
                    v = v.astype(dtype, copy=False)
                ch = node.attrs.get("channels")
                if v.ndim != 4 or (ch is not None and v.shape[1] != ch):
                    raise ShapeError(f"input shape {v.shape} incompatible with {ch} channels",
                                     "channels")
                values[node.id] = v
            else:
                values[node.id] = _exec_node(node, [values[i] for i in node.inputs])
        except GraphError:
            raise
        except KeyError as e:
            raise GraphError(f"missing parameter tensor {e}", node.id) from e
        except ValueError as e:
            raise GraphError(str(e), node.id) from e
    if keep_all:
        return values
    return {o: values[o] for o in graph.outputs}


def node_geometry(graph: ModelGraph) -> dict:
    """Symbolic ``{node_id: (channels, stride)}``; raises on channel bookkeeping errors."""
    geo = {}
    for n in graph.nodes:
        a = n.attrs
        ins = [geo[i] for i in n.inputs]
        if n.kind == "input":
            geo[n.id] = (a["channels"], 1)
            continue
        if n.kind in ("conv", "repvgg_block"):
            c_in, s = ins[0]
            w = n.params["weight" if n.kind == "conv" else "conv3.weight"]
            if w.shape[1] * a.get("groups", 1) != c_in:
                raise GraphError(f"expects {w.shape[1] * a.get('groups', 1)} channels, "
                                 f"producer gives {c_in}", n.id)
            geo[n.id] = (w.shape[0], s * a.get("stride", 1))
        elif n.kind == "concat":
            strides = {s for _, s in ins}
            if len(strides) != 1:
                raise GraphError(f"concat of mismatched strides {strides}", n.id)
            geo[n.id] = (sum(c for c, _ in ins), ins[0][1])
        elif n.kind == "add":
            if len(set(ins)) != 1:
                raise GraphError(f"add of mismatched inputs {ins}", n.id)
            geo[n.id] = ins[0]
        elif n.kind == "upsample":
            c, s = ins[0]
            if s % 2:
                raise GraphError("upsample below stride 1", n.id)
            geo[n.id] = (c, s // 2)
        elif n.kind == "maxpool":
            c, s = ins[0]
            geo[n.id] = (c, s * a.get("stride", 1))
        else:  # bn, act, fakequant
            geo[n.id] = ins[0]
    return geo


def validate(graph: ModelGraph, expected_strides=None) -> dict:
    """Structural audit: topological order (enforced at construction), channel
    bookkeeping, and optionally the output strides (e.g. ``(8, 16, 32)``)."""
    geo = node_geometry(graph)
    if expected_strides is not None:
        got = tuple(geo[o][1] for o in graph.outputs)
        if got != tuple(expected_strides):
            raise GraphError(f"output strides {got} != {tuple(expected_strides)}")
    return geo


# ---------------------------------------------------------------- manifest I/O
def _logical_to_raw(a: np.ndarray) -> np.ndarray:
    return a.reshape((1,) * (4 - a.ndim) + a.shape) if a.ndim < 4 else a


def graph_to_manifest(graph: ModelGraph):
    """Serialize to ``(manifest_text, blob_bytes)``; blob is concatenated raw tensors."""
    blob = bytearray()
    nodes = []
    for n in graph.nodes:
        params = {}
        for k, v in sorted(n.params.items()):
            params[k] = {"offset": len(blob), "shape": list(v.shape)}
            blob += tensor_to_bytes(_logical_to_raw(np.asarray(v, dtype=np.float32)))
        nodes.append({"id": n.id, "kind": n.kind, "inputs": list(n.inputs),
                      "attrs": n.attrs, "params": params})
    doc = {"format": MANIFEST_FORMAT, "outputs": list(graph.outputs), "meta": graph.meta,
           "nodes": nodes}
    return json.dumps(doc, indent=1, sort_keys=True) + "\n", bytes(blob)


class ManifestError(ValueError):
    pass


def graph_from_manifest(text: str, blob: bytes) -> ModelGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest is not valid JSON: {e}") from e
    if not isinstance(doc, dict) or doc.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"manifest format must be {MANIFEST_FORMAT!r}")
    try:
        nodes = []
        for nd in doc["nodes"]:
            params = {}
            for k, ref in nd.get("params", {}).items():
                arr, _ = tensor_from_bytes(blob, ref["offset"])
                params[k] = arr.reshape(ref["shape"])
            nodes.append(NodeSpec(nd["id"], nd["kind"], tuple(nd["inputs"]), nd.get("attrs", {}),
                                  params))
        return ModelGraph(nodes, tuple(doc["outputs"]), doc.get("meta", {}))
    except (KeyError, TypeError, GraphError) as e:
        raise ManifestError(f"malformed manifest: {e}") from e


def save_graph(graph: ModelGraph, manifest_path, blob_path) -> None:
    from .io import atomic_write

    text, blob = graph_to_manifest(graph)
    atomic_write(blob_path, blob)
    atomic_write(manifest_path, text.encode())


def load_graph(manifest_path, blob_path) -> ModelGraph:
    return graph_from_manifest(Path(manifest_path).read_text(), Path(blob_path).read_bytes())
