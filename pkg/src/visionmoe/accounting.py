"""Parameter and FLOP accounting for dense and MoE backbones.

One FLOP is one multiply-accumulate. Convolutions, linear maps, attention
matmuls and the experts selected per token are counted; normalization,
activations and softmax are not.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

from .analysis.stats import collect_stats
from .analysis.trace import RoutingTrace
from .backbones import (
    IsotropicSpec,
    Model,
    ModelSpec,
    get_preset,
    model_spec,
)
from .moe_layer import MoELayerConfig
from .routing import GateKind


def _spec(model) -> ModelSpec:
    return model.spec if isinstance(model, Model) else model


def _numel(shape) -> int:
    return int(math.prod(shape))


@dataclass
class CostReport:
    name: str
    total_params: int
    activated_params_per_token: int
    flops_per_image: int
    resolution: int
    activated_params_per_image: float | None = None
    breakdown: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def breakdown(model) -> OrderedDict[str, int]:
    """Parameter counts grouped by module (embedding, each block's parts, head)."""
    spec = _spec(model)
    out: OrderedDict[str, int] = OrderedDict()
    for name, shape in spec.param_shapes.items():
        parts = name.split(".")
        if parts[0] == "blocks":
            sub = parts[2]
            if sub == "moe":
                sub = "moe.experts" if parts[3] == "experts" else "moe.gate"
            key = f"blocks.{parts[1]}.{sub}"
        elif parts[0] == "downsample":
            key = f"downsample.{parts[1]}"
        elif parts[0] in ("patch_embed", "cls_token", "pos_embed", "stem", "stem_norm"):
            key = "embed"
        else:
            key = parts[0]
        out[key] = out.get(key, 0) + _numel(shape)
    return out


def count_params(model) -> int:
    return sum(_numel(s) for s in _spec(model).param_shapes.values())


def _moe_split(spec: ModelSpec):
    """Return ``(non_moe, {block: (gate, per_expert)})`` parameter counts."""
    non_moe = 0
    layers: dict[int, list[int]] = {}
    for name, shape in spec.param_shapes.items():
        kind, block, expert = spec.param_role(name)
        n = _numel(shape)
        if kind == "other":
            non_moe += n
            continue
        layers.setdefault(block, [0, 0])
        if kind == "gate":
            layers[block][0] += n
        elif expert == 0:
            layers[block][1] += n
    return non_moe, {b: tuple(v) for b, v in layers.items()}


def count_activated_per_token(model, k: int | None = None) -> int:
    """Non-MoE parameters plus, per MoE layer, the gate and ``k`` experts."""
    spec = _spec(model)
    non_moe, layers = _moe_split(spec)
    if not layers:
        return non_moe
    k = spec.moe.top_k if k is None else k
    return non_moe + sum(g + k * e for g, e in layers.values())


def count_activated_per_image(model, trace: RoutingTrace) -> float:
    """Like the per-token count, with the mean number of distinct experts each image touches."""
    spec = _spec(model)
    non_moe, layers = _moe_split(spec)
    if not layers:
        return float(non_moe)
    if len(trace) == 0:
        raise ValueError("count_activated_per_image needs a non-empty trace")
    stats = collect_stats(trace, num_experts=spec.moe.num_experts)
    total = float(non_moe)
    for block, (g, e) in layers.items():
        touched = stats[block].experts_touched_per_image().mean()
        total += g + touched * e
    return total


def _gate_macs(gate: GateKind, dim: int, n: int) -> int:
    if gate.kind == "linear":
        return dim * n
    p = gate.resolved_proj_dim(dim)
    return dim * p + p * n


def _mlp_macs(dim: int, spec_moe: MoELayerConfig | None, mlp_ratio: float) -> int:
    if spec_moe is None:
        return 2 * dim * int(round(mlp_ratio * dim))
    hidden = spec_moe.expert(dim).hidden
    return spec_moe.top_k * 2 * dim * hidden + _gate_macs(spec_moe.gate, dim, spec_moe.num_experts)


def count_flops(model, resolution: int | None = None) -> int:
    """Multiply-accumulates for one image at ``resolution`` (default: the model's image size)."""
    spec = _spec(model)
    a = spec.arch
    res = a.image_size if resolution is None else resolution
    if isinstance(a, IsotropicSpec):
        g = res // a.patch_size
        patches = g * g
        T = patches + 1
        d = a.dim
        total = patches * a.patch_size * a.patch_size * a.in_chans * d
        for i in range(a.depth):
            total += T * 4 * d * d + 2 * T * T * d
            total += T * _mlp_macs(d, spec.moe_for(i), a.mlp_ratio)
        return total + d * a.num_classes
    hw = (res // 4) ** 2
    total = hw * 16 * a.in_chans * a.dims[0]
    block = 0
    for s, depth in enumerate(a.depths):
        C = a.dims[s]
        if s > 0:
            hw //= 4
            total += hw * 4 * a.dims[s - 1] * C
        for _ in range(depth):
            total += hw * 49 * C + hw * _mlp_macs(C, spec.moe_for(block), a.mlp_ratio)
            block += 1
    return total + a.dims[-1] * a.num_classes


def cost_report(model, name: str = "", resolution: int | None = None,
                trace: RoutingTrace | None = None) -> CostReport:
    spec = _spec(model)
    return CostReport(
        name=name,
        total_params=count_params(spec),
        activated_params_per_token=count_activated_per_token(spec),
        flops_per_image=count_flops(spec, resolution),
        resolution=spec.arch.image_size if resolution is None else resolution,
        activated_params_per_image=None if trace is None else count_activated_per_image(spec, trace),
        breakdown=dict(breakdown(spec)),
    )


def format_table(reports: list[CostReport]) -> str:
    """Aligned text table with the #Params / per-sample / FLOPs columns."""
    header = ["Architecture", "#Params (x1e6)", "Per token #Params_act", "Per image #Params_act", "FLOPs"]
    rows = [header]
    for r in reports:
        per_img = "-" if r.activated_params_per_image is None else f"{r.activated_params_per_image / 1e6:.1f}"
        rows.append([r.name, f"{r.total_params / 1e6:.1f}", f"{r.activated_params_per_token / 1e6:.1f}",
                     per_img, f"{r.flops_per_image / 1e9:.1f}G"])
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for n, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells))
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


# -- published cost targets -------------------------------------------
@dataclass(frozen=True)
class PaperTarget:
    label: str
    preset: str
    metric: str                 # "params" | "per_token" | "flops"
    value: float                # millions for params, giga for flops
    rel_tol: float
    placement: str = "none"
    num_experts: int = 1
    top_k: int = 1
    mlp_ratio: float = 4.0

    def spec(self) -> ModelSpec:
        moe = None
        if self.placement != "none":
            moe = MoELayerConfig(num_experts=self.num_experts, top_k=self.top_k, mlp_ratio=self.mlp_ratio)
        return model_spec(get_preset(self.preset), self.placement, moe)

    def measure(self) -> float:
        spec = self.spec()
        if self.metric == "params":
            return count_params(spec) / 1e6
        if self.metric == "per_token":
            return count_activated_per_token(spec) / 1e6
        return count_flops(spec) / 1e9

    def check(self) -> tuple[float, bool]:
        got = self.measure()
        return got, abs(got - self.value) <= self.rel_tol * self.value


PAPER_TARGETS: tuple[PaperTarget, ...] = (
    PaperTarget("ViT-S", "vit-s", "params", 22.0, 0.01),
    PaperTarget("ViT-B", "vit-b", "params", 86.6, 0.01),
    PaperTarget("ConvNeXt-T", "convnext-t", "params", 28.6, 0.01),
    PaperTarget("ConvNeXt-S", "convnext-s", "params", 50.0, 0.01),
    PaperTarget("ConvNeXt-B", "convnext-b", "params", 88.6, 0.01),
    PaperTarget("ViT-S-8 Every 2", "vit-s", "params", 71.7, 0.01, "every2", 8, 2),
    PaperTarget("ViT-S-8 Last 2", "vit-s", "params", 38.6, 0.01, "last2", 8, 2),
    PaperTarget("ViT-B-8 Every 2", "vit-b", "params", 284.9, 0.01, "every2", 8, 2),
    PaperTarget("ConvNeXt-T-4 Last 2 (mlp_ratio 2)", "convnext-t", "params", 34.5, 0.01, "last2", 4, 1, 2.0),
    PaperTarget("ConvNeXt-T-8 Last 2", "convnext-t", "params", 70.0, 0.01, "last2", 8, 1, 4.0),
    PaperTarget("ConvNeXt-T-4 Last 2 Top 1 per-token", "convnext-t", "per_token", 25.6, 0.01, "last2", 4, 1, 2.0),
    PaperTarget("ViT-B dense per-token", "vit-b", "per_token", 86.6, 0.01),
    PaperTarget("ViT-S-8 Last 2 Top 2 per-token", "vit-s", "per_token", 25.0, 0.03, "last2", 8, 2),
    PaperTarget("ConvNeXt-T FLOPs", "convnext-t", "flops", 4.5, 0.05),
    PaperTarget("ViT-S FLOPs", "vit-s", "flops", 4.6, 0.05),
    PaperTarget("ViT-B FLOPs", "vit-b", "flops", 17.5, 0.05),
    PaperTarget("ConvNeXt-B FLOPs", "convnext-b", "flops", 15.4, 0.05),
)
