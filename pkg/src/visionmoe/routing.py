"""Token routing for sparse MoE layers.

A gate maps each token to a softmax distribution over ``N`` experts; the
``k`` most probable experts are kept with their raw (non-renormalized)
probabilities as combine weights. When experts have finite capacity, Batch
Prioritized Routing serves the most confident tokens first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import Tensor, as_tensor, concat, matmul, reshape, scatter_rows, take_rows

GATE_KINDS = ("linear", "cosine", "l2")


@dataclass(frozen=True)
class GateKind:
    kind: str = "linear"
    proj_dim: int | None = None
    temperature: float = 1.0

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise ValueError(f"unknown gate kind {self.kind!r}; expected one of {GATE_KINDS}")
        if self.temperature <= 0:
            raise ValueError("gate temperature must be positive")
        if self.proj_dim is not None and self.proj_dim < 1:
            raise ValueError("gate proj_dim must be positive")

    def resolved_proj_dim(self, dim: int) -> int:
        p = self.proj_dim if self.proj_dim is not None else max(1, dim // 4)
        if p > dim:
            raise ValueError(f"gate proj_dim {p} exceeds model dim {dim}")
        return p

    def param_shapes(self, dim: int, num_experts: int) -> dict[str, tuple[int, ...]]:
        if self.kind == "linear":
            return {"weight": (dim, num_experts), "bias": (num_experts,)}
        p = self.resolved_proj_dim(dim)
        return {"proj.weight": (dim, p), "proj.bias": (p,), "codes": (num_experts, p)}


@dataclass
class RoutingDecision:
    probs: Tensor                 # [T, N]
    topk_indices: np.ndarray      # [T, k] int
    topk_weights: Tensor          # [T, k]

    @property
    def num_tokens(self) -> int:
        return self.probs.shape[0]

    @property
    def num_experts(self) -> int:
        return self.probs.shape[1]

    @property
    def k(self) -> int:
        return self.topk_indices.shape[1]


@dataclass(frozen=True)
class CapacityConfig:
    """Per-expert slot budget; ``capacity_factor=None`` means unlimited."""

    capacity_factor: float | None = None

    def __post_init__(self):
        if self.capacity_factor is not None and self.capacity_factor <= 0:
            raise ValueError("capacity_factor must be positive or None (unlimited)")

    @property
    def unlimited(self) -> bool:
        return self.capacity_factor is None

    def slots(self, num_tokens: int, k: int, num_experts: int) -> int | None:
        if self.capacity_factor is None:
            return None
        return math.ceil(self.capacity_factor * num_tokens * k / num_experts)


@dataclass
class DispatchPlan:
    """Assignment of (token, choice rank) pairs to expert slots.

    ``tokens[e]``, ``ranks[e]`` and ``weights[e]`` list the assignments of
    expert ``e`` in processing order; ``dropped`` is an ``[n, 2]`` array of
    (token, rank) choices that found their expert full.
    """

    num_tokens: int
    tokens: list[np.ndarray]
    ranks: list[np.ndarray]
    weights: list[np.ndarray]
    dropped: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.intp))
    slots: int | None = None

    @property
    def num_experts(self) -> int:
        return len(self.tokens)

    def load(self) -> np.ndarray:
        return np.array([len(t) for t in self.tokens], dtype=np.intp)


def gate_logits(x: Tensor, gate: GateKind, params: dict[str, Tensor]) -> Tensor:
    if gate.kind == "linear":
        return ops.linear(x, params["weight"], params["bias"])
    z = ops.linear(x, params["proj.weight"], params["proj.bias"])
    codes = params["codes"]
    if gate.kind == "cosine":
        sim = matmul(ops.l2_normalize(z), ops.l2_normalize(codes).transpose(1, 0))
        return sim * (1.0 / gate.temperature)
    # squared distance expanded; eps keeps the sqrt differentiable at zero distance
    zz = (z * z).sum(axis=-1, keepdims=True)
    cc = (codes * codes).sum(axis=-1).reshape(1, codes.shape[0])
    d2 = zz - 2.0 * matmul(z, codes.transpose(1, 0)) + cc
    d2 = d2 + as_tensor(np.maximum(-d2.data, 0.0))  # clamp round-off negatives
    return -((d2 + 1e-12).sqrt()) * (1.0 / gate.temperature)


def route(x: Tensor, gate: GateKind, params: dict[str, Tensor], num_experts: int, k: int) -> RoutingDecision:
    """Gate ``x[T, d]`` and select the top-``k`` experts per token."""
    if not 1 <= k <= num_experts:
        raise ValueError(f"route: k={k} must satisfy 1 <= k <= N={num_experts}")
    logits = gate_logits(x, gate, params)
    if logits.shape[-1] != num_experts:
        raise ValueError(f"route: gate produced {logits.shape[-1]} logits for N={num_experts}")
    if not np.all(np.isfinite(logits.data)):
        raise FloatingPointError("route: non-finite gate logits")
    probs = ops.softmax(logits)
    idx, weights = ops.top_k(probs, k)
    return RoutingDecision(probs=probs, topk_indices=idx, topk_weights=weights)


def _cv_squared(v: Tensor) -> Tensor:
    m = v.mean()
    var = ((v - m) * (v - m)).mean()
    return var / (m * m)


def load_balance_loss(decision: RoutingDecision) -> Tensor:
    """Squared coefficient of variation of expert importance plus soft load.

    Importance is the per-expert sum of gate probabilities; soft load sums
    the probabilities only where the expert is among the token's top-k.
    """
    probs = decision.probs
    mask = np.zeros(probs.shape, dtype=probs.data.dtype)
    np.put_along_axis(mask, decision.topk_indices, 1.0, axis=-1)
    importance = probs.sum(axis=0)
    soft_load = (probs * as_tensor(mask)).sum(axis=0)
    return _cv_squared(importance) + _cv_squared(soft_load)


def bpr_dispatch(decision: RoutingDecision, capacity: CapacityConfig,
                 group_size: int | None = None) -> DispatchPlan:
    """Assign token choices to experts, most confident tokens first.

    Tokens are ranked by their top gate weight (ties to the lower index) and
    processed in that order, each trying its k choices in weight order; a
    choice whose expert is full is dropped, never re-routed. With
    ``group_size`` the token axis is split into consecutive groups (one per
    image) with independent priority and slots.
    """
    idx = decision.topk_indices
    w = decision.topk_weights.data
    T, k = idx.shape
    N = decision.num_experts
    group = T if group_size is None else group_size
    if T % group:
        raise ValueError(f"bpr_dispatch: {T} tokens not divisible into groups of {group}")
    slots = capacity.slots(group, k, N)

    tokens: list[list[int]] = [[] for _ in range(N)]
    ranks: list[list[int]] = [[] for _ in range(N)]
    dropped: list[tuple[int, int]] = []
    if slots is None:
        for r in range(k):
            for e in range(N):
                hit = np.nonzero(idx[:, r] == e)[0]
                tokens[e].extend(hit.tolist())
                ranks[e].extend([r] * len(hit))
    else:
        for start in range(0, T, group):
            gi = idx[start:start + group]
            gw = w[start:start + group]
            order = np.lexsort((np.arange(group), -gw[:, 0]))
            fill = np.zeros(N, dtype=np.intp)
            for t in order:
                for r in range(k):
                    e = gi[t, r]
                    if fill[e] < slots:
                        fill[e] += 1
                        tokens[e].append(start + t)
                        ranks[e].append(r)
                    else:
                        dropped.append((start + t, r))
    tok_arr = [np.asarray(t, dtype=np.intp) for t in tokens]
    rank_arr = [np.asarray(r, dtype=np.intp) for r in ranks]
    return DispatchPlan(
        num_tokens=T,
        tokens=tok_arr,
        ranks=rank_arr,
        weights=[w[t, r] for t, r in zip(tok_arr, rank_arr)],
        dropped=np.asarray(dropped, dtype=np.intp).reshape(-1, 2),
        slots=slots,
    )


def gather_expert_inputs(x: Tensor, plan: DispatchPlan) -> list[Tensor]:
    return [take_rows(x, t) for t in plan.tokens]


def combine(decision: RoutingDecision, plan: DispatchPlan, expert_outputs: list[Tensor]) -> Tensor:
    """Weighted sum of expert outputs back onto the token axis.

    ``expert_outputs[e]`` holds one row per assignment in ``plan.tokens[e]``.
    Tokens with every choice dropped receive zeros.
    """
    if len(expert_outputs) != plan.num_experts:
        raise ValueError(f"combine: {len(expert_outputs)} expert outputs for {plan.num_experts} experts")
    T, k = decision.topk_indices.shape
    flat_w = reshape(decision.topk_weights, (T * k, 1))
    parts, rows = [], []
    for e, out in enumerate(expert_outputs):
        if out.shape[0] != len(plan.tokens[e]):
            raise ValueError(f"combine: expert {e} produced {out.shape[0]} rows for "
                             f"{len(plan.tokens[e])} assigned tokens")
        if out.shape[0] == 0:
            continue
        we = take_rows(flat_w, plan.tokens[e] * k + plan.ranks[e])
        parts.append(out * we)
        rows.append(plan.tokens[e])
    d = expert_outputs[0].shape[-1]
    if not parts:
        return Tensor(np.zeros((T, d)))
    return scatter_rows(concat(parts, axis=0), np.concatenate(rows), T)
