from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import random_bn, random_repvgg
from repdet.blocks import (PRESETS, BlockConfig, CSPStackRepParams, GraphBuilder, HeadOutputs,
                           build_decoupled_head, build_efficientrep_backbone, build_model,
                           build_reppan_neck, csp_stackrep_forward)
from repdet.graph import ModelGraph, forward, param_count, validate
from repdet.layers import RepVGGBlockParams, repvgg_block_forward
from repdet.tensor import ShapeError, activation, batch_norm_infer, conv2d


def test_repvgg_zero_input_gives_zero(rng):
    p = random_repvgg(rng, 4, 4)
    for bn in (p.bn3, p.bn1, p.id_bn):
        bn.beta[:] = 0
        bn.running_mean[:] = 0
    assert np.all(repvgg_block_forward(np.zeros((1, 4, 5, 5)), p) == 0)


def test_repvgg_branch_ablation(rng):
    p = random_repvgg(rng, 4, 4)
    for bn in (p.bn1, p.id_bn):
        bn.gamma[:] = 0
        bn.beta[:] = 0
    x = rng.normal(size=(2, 4, 6, 6))
    plain = activation("relu", batch_norm_infer(conv2d(x, p.conv3), p.bn3))
    assert np.allclose(repvgg_block_forward(x, p), plain, atol=1e-12)


def test_repvgg_identity_presence_rule(rng):
    p = random_repvgg(rng, 4, 4)
    with pytest.raises(ShapeError):
        RepVGGBlockParams(p.conv3, p.bn3, p.conv1, p.bn1, None)
    q = random_repvgg(rng, 4, 8)
    with pytest.raises(ShapeError):
        RepVGGBlockParams(q.conv3, q.bn3, q.conv1, q.bn1, random_bn(rng, 8))
    with pytest.raises(ShapeError):
        repvgg_block_forward(np.zeros((1, 3, 4, 4)), p)


def test_block_config():
    assert BlockConfig("csp_stackrep", Fraction(1, 2), 1, 64).hidden == 32
    assert BlockConfig("csp_stackrep", Fraction(2, 3), 1, 96).hidden == 64
    with pytest.raises(ValueError):
        BlockConfig("csp_stackrep", Fraction(1, 8), 1, 2)
    with pytest.raises(ValueError):
        BlockConfig("resnet")
    with pytest.raises(ValueError):
        BlockConfig("rep_block", Fraction(3, 2))


def _csp_graph(width, depth, cc, cin=6, seed=0, dtype=np.float64):
    b = GraphBuilder(seed, dtype=dtype)
    x = b.input("x", cin)
    cfg = BlockConfig("csp_stackrep", cc, depth, width)
    out = b.csp_stackrep("csp", x, cfg)
    return b.build([out]), cfg


@given(st.integers(1, 3), st.sampled_from([Fraction(1, 2), Fraction(2, 3), Fraction(1, 1)]),
       st.sampled_from([6, 12, 24]))
def test_csp_stackrep_audit_and_shape(depth, cc, width):
    g, cfg = _csp_graph(width, depth, cc)
    one_by_one = [n for n in g.nodes if n.kind == "conv" and n.params["weight"].shape[2] == 1]
    assert len(one_by_one) == 3
    assert g.count("repvgg_block") == 2 * depth
    assert g.count("add") == depth
    y = forward(g, np.zeros((1, 6, 4, 4)))[g.outputs[0]]
    assert y.shape[1] == width


def test_csp_graph_matches_direct_forward(rng):
    g, cfg = _csp_graph(12, 2, Fraction(1, 2))
    x = rng.normal(size=(1, 6, 5, 5))
    direct = csp_stackrep_forward(x, cfg, CSPStackRepParams.from_graph(g, "csp"))
    assert np.allclose(forward(g, x)[g.outputs[0]], direct, atol=1e-12)


def test_csp_zeroed_subblocks_reduce_to_residual_only(rng):
    g, cfg = _csp_graph(8, 1, Fraction(1, 2))
    g = ModelGraph([n.replace(params={k: np.zeros_like(v) if k.endswith((".gamma", ".beta")) else v
                                      for k, v in n.params.items()})
                    if n.kind == "repvgg_block" else n for n in g.nodes], g.outputs)
    p = CSPStackRepParams.from_graph(g, "csp")
    x = rng.normal(size=(1, 6, 4, 4))

    def cba(v, cb):
        return activation("relu", batch_norm_infer(conv2d(v, cb[0]), cb[1]))

    a, b = cba(x, p.cv1), cba(x, p.cv2)
    expected = cba(np.concatenate([a, b], 1), p.cv3)
    assert np.allclose(csp_stackrep_forward(x, cfg, p), expected, atol=1e-12)


def test_csp_depth_mismatch_rejected():
    g, cfg = _csp_graph(8, 2, Fraction(1, 2))
    p = CSPStackRepParams.from_graph(g, "csp")
    with pytest.raises(ShapeError):
        csp_stackrep_forward(np.zeros((1, 6, 4, 4)), BlockConfig("csp_stackrep", Fraction(1, 2), 1, 8), p)
    with pytest.raises(ValueError):
        csp_stackrep_forward(np.zeros((1, 6, 4, 4)), BlockConfig("rep_block", Fraction(1, 2), 2, 8), p)


@pytest.mark.parametrize("style", ["rep_block", "csp_stackrep"])
def test_backbone_strides(style):
    g = build_efficientrep_backbone(style=style)
    out = forward(g, np.zeros((1, 3, 64, 64), np.float32))
    shapes = [out[o].shape[2:] for o in g.outputs]
    assert shapes == [(8, 8), (4, 4), (2, 2)]
    validate(g, (8, 16, 32))


def test_backbone_rejects_bad_stage_counts():
    with pytest.raises(ValueError):
        build_efficientrep_backbone(widths=(16, 32, 64, 128))


def test_rep_block_backbone_heavier_than_csp_at_same_width():
    rep = build_efficientrep_backbone(style="rep_block")
    csp = build_efficientrep_backbone(style="csp_stackrep", cc=Fraction(1, 2))
    assert param_count(rep) > param_count(csp)


def test_zero_weights_zero_outputs():
    g = build_efficientrep_backbone().map_params(lambda k, v: np.zeros_like(v))
    out = forward(g, np.ones((1, 3, 32, 32), np.float32))
    assert all(np.all(v == 0) for v in out.values())


def test_neck_shapes():
    g = build_reppan_neck()
    feats = {"C3": np.ones((1, 64, 8, 8), np.float32), "C4": np.ones((1, 128, 4, 4), np.float32),
             "C5": np.ones((1, 256, 2, 2), np.float32)}
    out = forward(g, feats)
    assert [out[o].shape[2:] for o in g.outputs] == [(8, 8), (4, 4), (2, 2)]
    with pytest.raises(Exception):
        forward(g, {**feats, "C5": np.ones((1, 128, 2, 2), np.float32)})


def test_neck_top_level_uses_bottom_up_path(rng):
    # the bottom-up path carries the finest level into the coarsest output
    g = build_reppan_neck()
    feats = {"C3": rng.normal(size=(1, 64, 8, 8)), "C4": rng.normal(size=(1, 128, 4, 4)),
             "C5": rng.normal(size=(1, 256, 2, 2))}
    base = forward(g, feats)
    moved = forward(g, {**feats, "C3": feats["C3"] + 1})
    assert not np.allclose(base[g.outputs[2]], moved[g.outputs[2]])


def test_head_channels():
    g = build_decoupled_head(num_classes=5, reg_max=16)
    lv = g.meta["levels"][0]
    assert g.node(lv["reg"]).params["weight"].shape[0] == 68
    assert g.node(lv["cls"]).params["weight"].shape[0] == 5
    g0 = build_decoupled_head(num_classes=5, reg_max=0)
    assert g0.node(g0.meta["levels"][0]["reg"]).params["weight"].shape[0] == 4


def test_hybrid_head_is_lighter():
    assert param_count(build_decoupled_head(hybrid=True)) < param_count(build_decoupled_head(hybrid=False))


def test_head_outputs_and_validation(rng):
    g = build_model("n", num_classes=4, reg_max=16)
    out = forward(g, rng.uniform(size=(1, 3, 64, 64)).astype(np.float32))
    head = HeadOutputs.from_outputs(g, out)
    assert [lv[0].shape for lv in head.levels] == [(1, 4, 8, 8), (1, 4, 4, 4), (1, 4, 2, 2)]
    assert head.levels[0][1].shape[1] == 4 * 17
    with pytest.raises(ShapeError):
        HeadOutputs([(np.zeros((1, 4, 8, 8)), np.zeros((1, 4, 8, 8)), 8)], 16, 4)


def test_preset_param_counts_are_monotone():
    counts = [param_count(build_model(k, with_head=True)) for k in "nts"]
    assert counts == sorted(counts)
    # the N layout lands in the published few-million order of magnitude
    assert 3e6 < counts[0] < 6e6


def test_preset_styles():
    assert PRESETS["n"].style == "rep_block" and PRESETS["s"].style == "rep_block"
    assert PRESETS["m"].style == "csp_stackrep" and PRESETS["m"].cc == Fraction(2, 3)
    assert PRESETS["l"].cc == Fraction(1, 2) and PRESETS["l"].act == "silu"
    assert PRESETS["m"].use_dfl and not PRESETS["n"].use_dfl
