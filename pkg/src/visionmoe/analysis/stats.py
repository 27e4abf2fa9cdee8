"""Expert-usage statistics folded from routing traces."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .trace import RoutingTrace


class EmptyTraceError(ValueError):
    pass


@dataclass
class LayerStats:
    """Per-image expert counts for one MoE layer.

    ``counts[i, e]`` counts every assigned choice (all k ranks) of image i
    that went to expert e; ``top1_counts`` counts only rank-0 choices and
    drives the visual and occurrence summaries. ``top1_map[i, t]`` is the
    rank-0 expert of token t.
    """

    layer_id: int
    num_experts: int
    k: int
    tokens_per_image: int
    grid: tuple[int, ...] | None
    image_ids: np.ndarray
    class_ids: np.ndarray | None
    counts: np.ndarray
    top1_counts: np.ndarray
    top1_map: np.ndarray
    dropped: np.ndarray

    @property
    def num_images(self) -> int:
        return len(self.image_ids)

    def experts_per_image(self) -> np.ndarray:
        return (self.top1_counts > 0).sum(axis=1)

    def experts_touched_per_image(self) -> np.ndarray:
        """Distinct experts receiving any assigned choice in each image."""
        return (self.counts > 0).sum(axis=1)

    def image_presence(self) -> np.ndarray:
        """Number of images in which each expert receives at least one choice."""
        return (self.counts > 0).sum(axis=0)

    def usage_fraction(self) -> np.ndarray:
        """Share of all assigned choices handled by each expert."""
        total = self.counts.sum()
        return self.counts.sum(axis=0) / total if total else np.zeros(self.num_experts)

    def inactive_experts(self) -> list[int]:
        return [int(e) for e in np.nonzero(self.counts.sum(axis=0) == 0)[0]]


@dataclass
class UsageStats:
    layers: dict[int, LayerStats] = field(default_factory=dict)

    def __getitem__(self, layer: int) -> LayerStats:
        if layer not in self.layers:
            raise KeyError(f"layer {layer} not in stats (available: {sorted(self.layers)})")
        return self.layers[layer]

    def layer_ids(self) -> list[int]:
        return sorted(self.layers)


def collect_stats(trace: RoutingTrace, num_experts: int | None = None) -> UsageStats:
    if len(trace) == 0:
        raise EmptyTraceError("cannot collect statistics from an empty trace")
    stats = UsageStats()
    for layer in trace.layers():
        recs = sorted(trace.for_layer(layer), key=lambda r: r.image_id)
        T, k = recs[0].topk.shape
        if any(r.topk.shape != (T, k) for r in recs):
            raise ValueError(f"layer {layer}: records disagree on token count or k")
        N = num_experts or max(r.num_experts or 0 for r in recs) or int(max(r.topk.max() for r in recs)) + 1
        I = len(recs)
        counts = np.zeros((I, N), dtype=np.int64)
        top1 = np.zeros((I, N), dtype=np.int64)
        top1_map = np.zeros((I, T), dtype=np.intp)
        dropped = np.zeros(I, dtype=np.int64)
        for i, r in enumerate(recs):
            mask = r.assigned_mask()
            counts[i] = np.bincount(r.topk[mask], minlength=N)
            top1[i] = np.bincount(r.topk[:, 0], minlength=N)
            top1_map[i] = r.topk[:, 0]
            dropped[i] = (~mask).sum()
        class_ids = None
        if all(r.class_id is not None for r in recs):
            class_ids = np.array([r.class_id for r in recs], dtype=np.intp)
        stats.layers[layer] = LayerStats(
            layer_id=layer, num_experts=N, k=k, tokens_per_image=T, grid=recs[0].grid,
            image_ids=np.array([r.image_id for r in recs]), class_ids=class_ids,
            counts=counts, top1_counts=top1, top1_map=top1_map, dropped=dropped)
    return stats


def _layer(stats, layer) -> LayerStats:
    if isinstance(stats, LayerStats):
        return stats
    if layer is None:
        if len(stats.layers) != 1:
            raise ValueError("stats hold several layers; pass layer=")
        layer = stats.layer_ids()[0]
    return stats[layer]


def similarity_from_counts(counts: np.ndarray) -> np.ndarray:
    """Co-usage similarity between experts from per-image counts ``[I, N]``.

    Over images where both experts appear the numerator accumulates
    ``c_i + c_j - |c_i - c_j|``; over images where either appears the
    denominator accumulates ``c_i + c_j``.
    """
    c = np.asarray(counts, dtype=np.float64)
    present = c > 0
    both = present[:, :, None] & present[:, None, :]
    either = present[:, :, None] | present[:, None, :]
    pair_sum = c[:, :, None] + c[:, None, :]
    num = np.where(both, pair_sum - np.abs(c[:, :, None] - c[:, None, :]), 0.0).sum(axis=0)
    den = np.where(either, pair_sum, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        S = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return S


def expert_similarity(stats, layer: int | None = None) -> np.ndarray:
    ls = _layer(stats, layer)
    inactive = ls.inactive_experts()
    if inactive:
        warnings.warn(f"layer {ls.layer_id}: experts {inactive} never appear; similarity rows set to 0",
                      stacklevel=2)
    return similarity_from_counts(ls.counts)


@dataclass
class StepCDF:
    """Right-continuous empirical CDF of per-image patch counts (active images only)."""

    values: np.ndarray
    fractions: np.ndarray
    domain: tuple[int, int]

    @property
    def empty(self) -> bool:
        return len(self.values) == 0

    def __call__(self, n) -> np.ndarray | float:
        if self.empty:
            return np.nan
        pos = np.searchsorted(self.values, n, side="right")
        out = np.where(pos > 0, self.fractions[np.maximum(pos - 1, 0)], 0.0)
        return float(out) if np.ndim(out) == 0 else out


def usage_cdf(stats, layer: int | None, expert: int) -> StepCDF:
    """CDF over images where ``expert`` wins at least one top-1 token."""
    ls = _layer(stats, layer)
    c = ls.top1_counts[:, expert]
    c = np.sort(c[c > 0])
    domain = (1, ls.tokens_per_image)
    if len(c) == 0:
        return StepCDF(np.zeros(0, dtype=np.int64), np.zeros(0), domain)
    values, idx = np.unique(c, return_index=True)
    counts_le = np.append(idx[1:], len(c))
    return StepCDF(values, counts_le / len(c), domain)


def spatial_map(stats, layer: int | None = None) -> np.ndarray:
    """``[H, W, N]`` frequency of each expert as rank-0 choice at every position."""
    ls = _layer(stats, layer)
    if ls.grid is None or len(ls.grid) != 2:
        raise ValueError(f"layer {ls.layer_id}: trace has no 2-D token grid")
    H, W = ls.grid
    onehot = np.zeros((ls.num_images, ls.tokens_per_image, ls.num_experts))
    np.put_along_axis(onehot, ls.top1_map[:, :, None], 1.0, axis=-1)
    return onehot.mean(axis=0).reshape(H, W, ls.num_experts)


def class_occurrence(stats, layer: int | None = None, num_classes: int | None = None,
                     normalize: str | None = None) -> np.ndarray:
    """``[N, C]`` total rank-0 assignments of each expert over images of each class."""
    ls = _layer(stats, layer)
    if ls.class_ids is None:
        raise ValueError(f"layer {ls.layer_id}: trace records carry no class labels")
    C = num_classes or int(ls.class_ids.max()) + 1
    M = np.zeros((ls.num_experts, C))
    np.add.at(M.T, ls.class_ids, ls.top1_counts)
    if normalize == "row":
        s = M.sum(axis=1, keepdims=True)
        M = np.divide(M, s, out=np.zeros_like(M), where=s > 0)
    elif normalize == "column":
        s = M.sum(axis=0, keepdims=True)
        M = np.divide(M, s, out=np.zeros_like(M), where=s > 0)
    elif normalize is not None:
        raise ValueError(f"normalize must be 'row', 'column' or None, got {normalize!r}")
    return M


def pareto_front(points):
    """Non-dominated ``(cost, accuracy, tag)`` points, sorted by cost.

    A point is dominated when another has no greater cost and no lower
    accuracy, and is strictly better in one of them.
    """
    pts = list(points)
    if not pts:
        raise ValueError("pareto_front needs at least one point")
    order = sorted(range(len(pts)), key=lambda i: (pts[i][0], -pts[i][1], i))
    front = []
    best = -np.inf
    last_cost = None
    for i in order:
        cost, acc = pts[i][0], pts[i][1]
        if acc > best:
            front.append(pts[i])
            best = acc
            last_cost = cost
        elif acc == best and cost == last_cost:
            # exact duplicates do not dominate each other
            front.append(pts[i])
    return front
