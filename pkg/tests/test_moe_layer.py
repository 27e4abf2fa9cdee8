import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from visionmoe import ops
from visionmoe.moe_layer import (
    ExpertConfig,
    MoELayerConfig,
    _attn,
    convnext_block_forward,
    convnext_block_shapes,
    expert_forward,
    moe_block_forward,
    moe_forward,
    moe_shapes,
    sub,
    vit_block_forward,
    vit_block_shapes,
)
from visionmoe.routing import CapacityConfig, GateKind
from visionmoe.tensor import Tensor, backward, parameter


def random_params(shapes, rng, scale=0.3):
    return {k: parameter(rng.normal(scale=scale, size=s)) for k, s in shapes.items()}


def tie_to_dense(moe_params, dense_params, N, zero_gate=False):
    """Copy the dense MLP weights into every expert of a MoE parameter dict."""
    p = dict(moe_params)
    for k, v in dense_params.items():
        if k.startswith("mlp."):
            rest = k[len("mlp."):]
            for e in range(N):
                p[f"moe.experts.{e}.{rest}"] = parameter(v.data.copy())
        elif not k.startswith("moe."):
            p[k] = v
    if zero_gate:
        for k in p:
            if k.startswith("moe.gate."):
                p[k] = parameter(np.zeros_like(p[k].data))
    return p


def gelu_ref(x):
    return 0.5 * x * (1 + erf(x / np.sqrt(2)))


# -- experts ----------------------------------------------------------
def test_expert_hidden_width():
    assert ExpertConfig(64, 2.0).hidden == 128
    assert ExpertConfig(10, 0.25).hidden == 2
    with pytest.raises(ValueError):
        ExpertConfig(4, 0.1).hidden


def test_moe_config_validation():
    with pytest.raises(ValueError):
        MoELayerConfig(num_experts=2, top_k=3)
    with pytest.raises(ValueError):
        MoELayerConfig(style="swin")


def test_expert_zero_weights_give_zero(rng):
    p = {"fc1.weight": Tensor(np.zeros((4, 8))), "fc1.bias": Tensor(np.zeros(8)),
         "fc2.weight": Tensor(np.zeros((8, 4))), "fc2.bias": Tensor(np.zeros(4))}
    np.testing.assert_array_equal(expert_forward(p, Tensor(rng.normal(size=(3, 4)))).data, 0.0)


def test_expert_matches_gelu_oracle(rng):
    d, h = 5, 7
    W1, b1, W2, b2 = rng.normal(size=(d, h)), rng.normal(size=h), rng.normal(size=(h, d)), rng.normal(size=d)
    x = rng.normal(size=(4, d))
    p = {"fc1.weight": Tensor(W1), "fc1.bias": Tensor(b1), "fc2.weight": Tensor(W2), "fc2.bias": Tensor(b2)}
    np.testing.assert_allclose(expert_forward(p, Tensor(x)).data, gelu_ref(x @ W1 + b1) @ W2 + b2, atol=1e-12)


def test_expert_near_identity_in_linear_regime(rng):
    # shifting by c puts GELU in its near-linear range (gelu(u) ~ u for large u)
    d, c = 4, 8.0
    p = {"fc1.weight": Tensor(np.eye(d)), "fc1.bias": Tensor(np.full(d, c)),
         "fc2.weight": Tensor(np.eye(d)), "fc2.bias": Tensor(np.full(d, -c))}
    x = rng.uniform(0, 1, size=(6, d))
    y = expert_forward(p, Tensor(x)).data
    np.testing.assert_allclose(y, gelu_ref(x + c) - c, atol=1e-12)
    np.testing.assert_allclose(y, x, atol=1e-9)


# -- collapse to dense ------------------------------------------------
def _vit_pair(rng, N, k, d=8, heads=2, kind="linear"):
    moe = MoELayerConfig(num_experts=N, top_k=k, gate=GateKind(kind), mlp_ratio=2.0)
    dense = random_params(vit_block_shapes(d, 2.0, None), rng)
    moe_p = tie_to_dense(random_params(vit_block_shapes(d, 2.0, moe), rng), dense, N)
    return moe, dense, moe_p


def _convnext_pair(rng, N, k, d=6, kind="linear"):
    moe = MoELayerConfig(num_experts=N, top_k=k, gate=GateKind(kind), mlp_ratio=2.0, style="convnext")
    dense = random_params(convnext_block_shapes(d, 2.0, None), rng)
    moe_p = tie_to_dense(random_params(convnext_block_shapes(d, 2.0, moe), rng), dense, N)
    return moe, dense, moe_p


@pytest.mark.parametrize("kind", ["linear", "cosine", "l2"])
def test_single_expert_vit_equals_dense(rng, kind):
    moe, dense, moe_p = _vit_pair(rng, 1, 1, kind=kind)
    x = Tensor(rng.normal(size=(2, 5, 8)))
    y_moe, out = vit_block_forward(moe_p, x, 2, moe)
    y_dense, _ = vit_block_forward(dense, x, 2)
    np.testing.assert_allclose(out.decision.topk_weights.data, 1.0, atol=0)
    assert np.max(np.abs(y_moe.data - y_dense.data)) < 1e-9


def test_single_expert_convnext_equals_dense(rng):
    moe, dense, moe_p = _convnext_pair(rng, 1, 1)
    x = Tensor(rng.normal(size=(2, 4, 4, 6)))
    y_moe, _ = convnext_block_forward(moe_p, x, moe)
    y_dense, _ = convnext_block_forward(dense, x, dense_inner_skip=True)
    assert np.max(np.abs(y_moe.data - y_dense.data)) < 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10_000), st.sampled_from(["linear", "cosine", "l2"]))
def test_tied_experts_all_selected_equals_dense(N, seed, kind):
    rng = np.random.default_rng(seed)
    moe, dense, moe_p = _vit_pair(rng, N, N, kind=kind)
    x = Tensor(rng.normal(size=(2, 3, 8)))
    y_moe, _ = vit_block_forward(moe_p, x, 2, moe)
    y_dense, _ = vit_block_forward(dense, x, 2)
    assert np.max(np.abs(y_moe.data - y_dense.data)) < 1e-9

    cmoe, cdense, cmoe_p = _convnext_pair(rng, N, N, kind=kind)
    z = Tensor(rng.normal(size=(1, 3, 3, 6)))
    c_moe, _ = convnext_block_forward(cmoe_p, z, cmoe)
    c_dense, _ = convnext_block_forward(cdense, z, dense_inner_skip=True)
    assert np.max(np.abs(c_moe.data - c_dense.data)) < 1e-9


def test_zero_experts_return_skip_path_vit(rng):
    moe = MoELayerConfig(num_experts=3, top_k=2)
    p = random_params(vit_block_shapes(8, 4.0, moe), rng)
    for k in p:
        if k.startswith("moe.experts."):
            p[k] = Tensor(np.zeros_like(p[k].data))
    x = Tensor(rng.normal(size=(1, 4, 8)))
    y, _ = vit_block_forward(p, x, 2, moe)
    # only the attention sub-block contributes
    x1 = x.data + _attn(sub(p, "attn"), ops.layer_norm(x, p["norm1.weight"], p["norm1.bias"]), 2).data
    np.testing.assert_allclose(y.data, x1, atol=1e-12)


def test_zero_experts_return_skip_path_convnext(rng):
    moe = MoELayerConfig(num_experts=2, top_k=1, style="convnext", inner_skip=False)
    p = random_params(convnext_block_shapes(6, 4.0, moe), rng)
    for k in p:
        if k.startswith("moe.experts."):
            p[k] = Tensor(np.zeros_like(p[k].data))
    x = Tensor(rng.normal(size=(1, 3, 3, 6)))
    y, _ = convnext_block_forward(p, x, moe)
    np.testing.assert_allclose(y.data, x.data, atol=0)


def test_dropped_tokens_ride_the_skip(rng):
    # one slot per expert: most tokens are dropped and see only the skip paths
    moe = MoELayerConfig(num_experts=2, top_k=1, capacity=CapacityConfig(0.25), style="convnext")
    p = random_params(convnext_block_shapes(6, 2.0, moe), rng)
    x = Tensor(rng.normal(size=(1, 4, 2, 6)))
    y, out = convnext_block_forward(p, x, moe)
    assert out.plan.slots == 1
    assert len(out.plan.dropped) == 8 - out.plan.load().sum() >= 6
    np.testing.assert_array_equal(out.y.data[0, out.plan.dropped[:, 0]], 0.0)
    assert np.all(np.isfinite(y.data))


def test_moe_block_dispatch_by_style(rng):
    moe = MoELayerConfig(num_experts=2, top_k=1)
    p = random_params(vit_block_shapes(8, 4.0, moe), rng)
    x = Tensor(rng.normal(size=(1, 3, 8)))
    np.testing.assert_array_equal(moe_block_forward(moe, p, x, heads=2)[0].data,
                                  vit_block_forward(p, x, 2, moe)[0].data)
    with pytest.raises(ValueError):
        moe_block_forward(moe, p, x)


# -- locality and gradients -------------------------------------------
@pytest.mark.parametrize("kind", ["linear", "cosine", "l2"])
def test_token_locality(rng, kind):
    moe = MoELayerConfig(num_experts=4, top_k=2, gate=GateKind(kind))
    p = random_params(moe_shapes(8, moe), rng)
    h = rng.normal(size=(2, 6, 8))
    base = moe_forward(moe, p, Tensor(h)).y.data
    h2 = h.copy()
    h2[1, 3] += rng.normal(size=8)
    pert = moe_forward(moe, p, Tensor(h2)).y.data
    changed = np.abs(pert - base).max(axis=-1) > 0
    assert changed[1, 3]
    changed[1, 3] = False
    assert not changed.any()


@pytest.mark.parametrize("kind", ["linear", "cosine", "l2"])
def test_gate_receives_gradient(rng, kind):
    moe = MoELayerConfig(num_experts=3, top_k=1, gate=GateKind(kind))
    p = random_params(vit_block_shapes(8, 2.0, moe), rng)
    y, _ = vit_block_forward(p, Tensor(rng.normal(size=(2, 5, 8))), 2, moe)
    backward((y * y).sum())
    gate = [v for k, v in p.items() if k.startswith("moe.gate.")]
    assert any(np.abs(g.grad).max() > 0 for g in gate if g.grad is not None)
    for g in gate:
        if g.grad is not None:
            assert np.all(np.isfinite(g.grad))
