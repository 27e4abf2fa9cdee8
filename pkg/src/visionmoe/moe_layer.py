"""MoE blocks for ViT-style and ConvNeXt-style backbones.

Experts are two-layer GELU MLPs applied per token (equivalently 1x1
convolutions on a feature map). Parameter dictionaries use dotted names;
each block takes the sub-dictionary for its prefix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .routing import (
    CapacityConfig,
    DispatchPlan,
    GateKind,
    RoutingDecision,
    bpr_dispatch,
    combine,
    gather_expert_inputs,
    load_balance_loss,
    route,
)
from .tensor import Tensor

STYLES = ("vit", "convnext")


@dataclass(frozen=True)
class ExpertConfig:
    dim: int
    mlp_ratio: float = 4.0

    @property
    def hidden(self) -> int:
        h = int(round(self.mlp_ratio * self.dim))
        if h < 1:
            raise ValueError(f"expert hidden width must be >= 1 (dim={self.dim}, mlp_ratio={self.mlp_ratio})")
        return h


@dataclass(frozen=True)
class MoELayerConfig:
    num_experts: int = 4
    top_k: int = 1
    gate: GateKind = field(default_factory=GateKind)
    mlp_ratio: float = 4.0
    capacity: CapacityConfig = field(default_factory=CapacityConfig)
    style: str = "vit"
    # extra skip around the MoE inside the ConvNeXt block
    inner_skip: bool = True

    def __post_init__(self):
        if not 1 <= self.top_k <= self.num_experts:
            raise ValueError(f"MoE config requires 1 <= top_k <= num_experts, got k={self.top_k}, N={self.num_experts}")
        if self.style not in STYLES:
            raise ValueError(f"unknown MoE block style {self.style!r}")

    def expert(self, dim: int) -> ExpertConfig:
        return ExpertConfig(dim, self.mlp_ratio)


def sub(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    """Strip ``prefix.`` from the matching keys of ``params``."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


def mlp_shapes(dim: int, hidden: int) -> dict[str, tuple[int, ...]]:
    return {"fc1.weight": (dim, hidden), "fc1.bias": (hidden,),
            "fc2.weight": (hidden, dim), "fc2.bias": (dim,)}


def moe_shapes(dim: int, cfg: MoELayerConfig) -> dict[str, tuple[int, ...]]:
    shapes = {f"gate.{k}": v for k, v in cfg.gate.param_shapes(dim, cfg.num_experts).items()}
    hidden = cfg.expert(dim).hidden
    for e in range(cfg.num_experts):
        shapes.update({f"experts.{e}.{k}": v for k, v in mlp_shapes(dim, hidden).items()})
    return shapes


def expert_forward(p: dict[str, Tensor], tokens: Tensor) -> Tensor:
    """linear -> GELU -> linear on ``tokens[M, d]``."""
    h = ops.gelu(ops.linear(tokens, p["fc1.weight"], p["fc1.bias"]))
    return ops.linear(h, p["fc2.weight"], p["fc2.bias"])


mlp_forward = expert_forward


@dataclass
class MoEOutput:
    y: Tensor
    decision: RoutingDecision
    plan: DispatchPlan
    aux_loss: Tensor


def moe_forward(cfg: MoELayerConfig, p: dict[str, Tensor], h: Tensor) -> MoEOutput:
    """Route ``h[B, T, d]`` through the experts; priority and capacity are per image."""
    B, T, d = h.shape
    flat = h.reshape(B * T, d)
    decision = route(flat, cfg.gate, sub(p, "gate"), cfg.num_experts, cfg.top_k)
    plan = bpr_dispatch(decision, cfg.capacity, group_size=T)
    inputs = gather_expert_inputs(flat, plan)
    outputs = [expert_forward(sub(p, f"experts.{e}"), x_e) for e, x_e in enumerate(inputs)]
    y = combine(decision, plan, outputs).reshape(B, T, d)
    return MoEOutput(y, decision, plan, load_balance_loss(decision))


# -- ViT blocks -------------------------------------------------------
def vit_block_shapes(dim: int, mlp_ratio: float, moe: MoELayerConfig | None) -> dict[str, tuple[int, ...]]:
    shapes = {"norm1.weight": (dim,), "norm1.bias": (dim,)}
    for n in "qkvo":
        shapes[f"attn.{n}.weight"] = (dim, dim)
        shapes[f"attn.{n}.bias"] = (dim,)
    shapes.update({"norm2.weight": (dim,), "norm2.bias": (dim,)})
    if moe is None:
        inner = {f"mlp.{k}": v for k, v in mlp_shapes(dim, ExpertConfig(dim, mlp_ratio).hidden).items()}
    else:
        inner = {f"moe.{k}": v for k, v in moe_shapes(dim, moe).items()}
    shapes.update(inner)
    return shapes


def _attn(p: dict[str, Tensor], x: Tensor, heads: int) -> Tensor:
    return ops.attention(x, heads, p["q.weight"], p["k.weight"], p["v.weight"], p["o.weight"],
                         p["q.bias"], p["k.bias"], p["v.bias"], p["o.bias"])


def vit_block_forward(p: dict[str, Tensor], x: Tensor, heads: int, moe: MoELayerConfig | None = None,
                      drop_path: float = 0.0, rng: np.random.Generator | None = None):
    """Pre-norm transformer block on ``x[B, T, d]``; returns ``(y, MoEOutput | None)``."""
    x = x + ops.drop_path(_attn(sub(p, "attn"), ops.layer_norm(x, p["norm1.weight"], p["norm1.bias"]), heads),
                          drop_path, rng)
    h = ops.layer_norm(x, p["norm2.weight"], p["norm2.bias"])
    if moe is None:
        return x + ops.drop_path(mlp_forward(sub(p, "mlp"), h), drop_path, rng), None
    out = moe_forward(moe, sub(p, "moe"), h)
    return x + ops.drop_path(out.y, drop_path, rng), out


# -- ConvNeXt blocks --------------------------------------------------
def convnext_block_shapes(dim: int, mlp_ratio: float, moe: MoELayerConfig | None) -> dict[str, tuple[int, ...]]:
    shapes = {"dwconv.weight": (dim, 7, 7), "dwconv.bias": (dim,),
              "norm.weight": (dim,), "norm.bias": (dim,)}
    if moe is None:
        shapes.update({f"mlp.{k}": v for k, v in mlp_shapes(dim, ExpertConfig(dim, mlp_ratio).hidden).items()})
    else:
        shapes.update({f"moe.{k}": v for k, v in moe_shapes(dim, moe).items()})
    shapes["gamma"] = (dim,)
    return shapes


def convnext_block_forward(p: dict[str, Tensor], x: Tensor, moe: MoELayerConfig | None = None,
                           drop_path: float = 0.0, rng: np.random.Generator | None = None,
                           dense_inner_skip: bool = False):
    """ConvNeXt block on channels-last ``x[B, H, W, C]``; returns ``(y, MoEOutput | None)``.

    The MoE variant routes every spatial position as a token and, with
    ``moe.inner_skip``, adds the normalized features back around the MoE.
    ``dense_inner_skip`` gives the dense block the same extra skip, which is
    the dense counterpart of that MoE topology.
    """
    B, H, W, C = x.shape
    z = ops.depthwise_conv7x7(x, p["dwconv.weight"], p["dwconv.bias"], channels_last=True)
    h = ops.layer_norm(z, p["norm.weight"], p["norm.bias"])
    out = None
    if moe is None:
        branch = mlp_forward(sub(p, "mlp"), h)
        if dense_inner_skip:
            branch = branch + h
    else:
        out = moe_forward(moe, sub(p, "moe"), h.reshape(B, H * W, C))
        branch = out.y.reshape(B, H, W, C)
        if moe.inner_skip:
            branch = branch + h
    return x + ops.drop_path(branch * p["gamma"], drop_path, rng), out


def moe_block_forward(cfg: MoELayerConfig, p: dict[str, Tensor], x: Tensor, heads: int | None = None,
                      drop_path: float = 0.0, rng: np.random.Generator | None = None):
    """Dispatch to the ViT or ConvNeXt MoE block according to ``cfg.style``."""
    if cfg.style == "vit":
        if heads is None:
            raise ValueError("ViT-style MoE block needs the number of attention heads")
        return vit_block_forward(p, x, heads, cfg, drop_path, rng)
    return convnext_block_forward(p, x, cfg, drop_path, rng)
