import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visionmoe.accounting import (
    PAPER_TARGETS,
    breakdown,
    cost_report,
    count_activated_per_image,
    count_activated_per_token,
    count_flops,
    count_params,
    format_table,
)
from visionmoe.analysis.trace import RoutingTrace, TraceRecord
from visionmoe.backbones import HierarchicalSpec, IsotropicSpec, build_model, forward_classify, get_preset, model_spec
from visionmoe.moe_layer import MoELayerConfig
from visionmoe.routing import GateKind


# -- hand formulas ----------------------------------------------------
def vit_params(d, L, patch=16, res=224, classes=1000, ratio=4.0, moe_blocks=(), N=1, gate="linear"):
    h = int(round(ratio * d))
    mlp = d * h + h + h * d + d
    T = (res // patch) ** 2 + 1
    total = 3 * patch * patch * d + d + d + T * d
    for i in range(L):
        total += 4 * d + 4 * (d * d + d)
        total += mlp if i not in moe_blocks else N * mlp + (d * N + N)
    return total + 2 * d + d * classes + classes


def convnext_params(depths, dims, classes=1000, ratio=4.0):
    total = 48 * dims[0] + 3 * dims[0]
    for s, (n, C) in enumerate(zip(depths, dims)):
        if s:
            P = dims[s - 1]
            total += 2 * P + 4 * P * C + C
        h = int(round(ratio * C))
        total += n * (49 * C + C + 2 * C + C * h + h + h * C + C + C)
    return total + 2 * dims[-1] + dims[-1] * classes + classes


def vit_macs(d, L, patch=16, res=224, classes=1000, ratio=4.0):
    n = (res // patch) ** 2
    T = n + 1
    per_block = T * 4 * d * d + 2 * T * T * d + T * 2 * d * int(round(ratio * d))
    return n * 3 * patch * patch * d + L * per_block + d * classes


# -- exact hand counts ------------------------------------------------
def test_vit_params_match_hand_formula():
    assert count_params(model_spec(get_preset("vit-s"))) == vit_params(384, 12)
    assert count_params(model_spec(get_preset("vit-b"))) == vit_params(768, 12)
    spec = model_spec(get_preset("vit-s"), "every2", MoELayerConfig(num_experts=8, top_k=2))
    assert count_params(spec) == vit_params(384, 12, moe_blocks={1, 3, 5, 7, 9, 11}, N=8)


def test_convnext_params_match_hand_formula():
    for name in ("convnext-t", "convnext-s", "convnext-b"):
        a = get_preset(name)
        assert count_params(model_spec(a)) == convnext_params(a.depths, a.dims)


def test_vit_flops_match_hand_formula():
    assert count_flops(model_spec(get_preset("vit-s"))) == vit_macs(384, 12)
    assert count_flops(model_spec(get_preset("vit-s")), resolution=384) == vit_macs(384, 12, res=384)


@pytest.mark.parametrize("target", PAPER_TARGETS, ids=lambda t: t.label)
def test_published_cost_figures(target):
    got, ok = target.check()
    assert ok, f"{target.label}: {got:.3f} vs {target.value} (tol {target.rel_tol:.0%})"


@pytest.mark.parametrize("preset,placement", [("micro-vit", "none"), ("micro-vit", "every2"),
                                              ("micro-convnext", "none"), ("micro-convnext", "last3")])
def test_count_matches_materialized_model(preset, placement):
    moe = None if placement == "none" else MoELayerConfig(num_experts=4, top_k=2, gate=GateKind("cosine"))
    m = build_model(preset, placement, moe)
    assert count_params(m) == sum(p.data.size for p in m.parameters())
    assert count_params(m) == count_params(m.spec)


# -- invariants -------------------------------------------------------
@pytest.mark.parametrize("preset,placement", [("vit-s", "every2"), ("convnext-t", "last3"), ("vit-b", "none"),
                                              ("micro-convnext", "stage")])
def test_breakdown_sums_to_total(preset, placement):
    moe = None if placement == "none" else MoELayerConfig(num_experts=4, top_k=1)
    spec = model_spec(get_preset(preset), placement, moe)
    b = breakdown(spec)
    assert sum(b.values()) == count_params(spec)
    assert all(v > 0 for v in b.values())


def test_dense_figures_agree():
    m = build_model("micro-vit", "none")
    _, trace, _ = forward_classify(m, np.zeros((1, 3, 32, 32)), record_trace=True)
    r = cost_report(m)
    assert r.total_params == r.activated_params_per_token == count_activated_per_image(m, trace)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 16), st.sampled_from(["vit-s", "convnext-t"]), st.sampled_from(["every2", "last2"]),
       st.sampled_from([1.0, 2.0, 4.0]))
def test_monotone_in_experts_and_k(N, preset, placement, ratio):
    def spec(n, k):
        return model_spec(get_preset(preset), placement, MoELayerConfig(num_experts=n, top_k=k, mlp_ratio=ratio))

    s = spec(N, 1)
    assert count_params(spec(N + 1, 1)) > count_params(s)
    assert count_activated_per_token(s) <= count_params(s)
    if N >= 2:
        assert count_activated_per_token(spec(N, 2)) > count_activated_per_token(s)
        assert count_flops(spec(N, 2)) > count_flops(s)


def test_single_expert_within_gate_size_of_dense():
    dense = model_spec(get_preset("vit-s"))
    moe = model_spec(get_preset("vit-s"), "every2", MoELayerConfig(num_experts=1, top_k=1))
    gate = 6 * (384 * 1 + 1)
    assert count_params(moe) - count_params(dense) == gate
    assert count_activated_per_token(moe) - count_activated_per_token(dense) == gate


def test_per_token_counts_k_experts():
    spec = model_spec(get_preset("vit-s"), "last2", MoELayerConfig(num_experts=8, top_k=2))
    expert = 2 * 384 * 1536 + 1536 + 384
    gate = 384 * 8 + 8
    dense = vit_params(384, 12)
    assert count_activated_per_token(spec) == dense + 2 * (gate + expert)
    assert count_activated_per_token(spec, k=1) == dense + 2 * gate


# -- per-image activation ---------------------------------------------
def _trace(layers, T, N, choose, images=3):
    return RoutingTrace(TraceRecord(i, 0, layer, None, choose(i, layer, T), None, N)
                        for i in range(images) for layer in layers)


def _micro(N, k=1):
    return model_spec(get_preset("micro-vit"), "last2", MoELayerConfig(num_experts=N, top_k=k, mlp_ratio=2.0))


def test_per_image_single_expert_equals_per_token():
    spec = _micro(1)
    tr = _trace(spec.moe_layers, 64, 1, lambda i, l, T: np.zeros((T, 1)))
    assert count_activated_per_image(spec, tr) == count_activated_per_token(spec)


def test_per_image_one_expert_per_image_equals_top1():
    spec = _micro(4)
    tr = _trace(spec.moe_layers, 64, 4, lambda i, l, T: np.full((T, 1), i % 4))
    assert count_activated_per_image(spec, tr) == count_activated_per_token(spec, k=1)


def test_per_image_all_experts_touched():
    N = 8
    spec = _micro(N)
    tr = _trace(spec.moe_layers, 64, N, lambda i, l, T: (np.arange(T) % N)[:, None])
    d, h = 64, 128
    expert = d * h + h + h * d + d
    gate = d * N + N
    non_moe = count_activated_per_token(spec) - 2 * (gate + expert)
    assert count_activated_per_image(spec, tr) == non_moe + 2 * (N * expert + gate)


def test_per_image_mean_over_images():
    # image i touches i + 1 distinct experts: mean 2 for three images
    spec = _micro(4)
    tr = _trace(spec.moe_layers, 64, 4, lambda i, l, T: (np.arange(T) % (i + 1))[:, None])
    base = count_activated_per_token(spec, k=1)
    expert = 2 * 64 * 128 + 128 + 64
    assert count_activated_per_image(spec, tr) == pytest.approx(base + 2 * 1.0 * expert)


def test_per_image_ignores_dropped_choices():
    spec = _micro(2)
    recs = [TraceRecord(0, 0, layer, None, np.array([[0], [1]]), None, 2, dropped=[[1, 0]])
            for layer in spec.moe_layers]
    assert count_activated_per_image(spec, RoutingTrace(recs)) == count_activated_per_token(spec, k=1)


def test_per_image_needs_trace():
    with pytest.raises(ValueError):
        count_activated_per_image(_micro(2), RoutingTrace())


def test_format_table_columns():
    reports = [cost_report(model_spec(get_preset("vit-s")), "ViT-S"),
               cost_report(model_spec(get_preset("convnext-t")), "ConvNeXt-T")]
    text = format_table(reports)
    lines = text.splitlines()
    assert "#Params" in lines[0] and "FLOPs" in lines[0]
    assert "22.1" in lines[2] and "4.6G" in lines[2]
    assert "28.6" in lines[3] and "4.5G" in lines[3]
    assert len({len(line) for line in lines}) == 1


def test_hierarchical_resolution_scaling():
    spec = model_spec(HierarchicalSpec())
    # every term scales with the number of positions except the head
    head = 768 * 1000
    assert count_flops(spec, 448) - head == 4 * (count_flops(spec, 224) - head)


def test_default_resolution_is_the_spec_resolution():
    spec = model_spec(IsotropicSpec())
    assert count_flops(spec, 224) == count_flops(spec)
    assert cost_report(spec, resolution=384).flops_per_image == count_flops(spec, 384)
