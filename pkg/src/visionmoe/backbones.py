"""Isotropic (ViT) and hierarchical (ConvNeXt) classifiers with MoE placement.

A :class:`ModelSpec` is pure metadata: architecture, placement, MoE
configuration and the ordered table of parameter shapes. Accounting works on
the ModelSpec alone, so full-size models never have to be materialized.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .analysis.trace import RoutingTrace, TraceRecord
from .moe_layer import (
    MoELayerConfig,
    MoEOutput,
    convnext_block_forward,
    convnext_block_shapes,
    sub,
    vit_block_forward,
    vit_block_shapes,
)
from .routing import CapacityConfig, GateKind
from .tensor import Tensor, broadcast_to, concat, default_dtype

PLACEMENTS = ("none", "every2", "stage", "last2", "last3")


class UnsupportedPlacement(ValueError):
    pass


@dataclass(frozen=True)
class IsotropicSpec:
    image_size: int = 224
    patch_size: int = 16
    dim: int = 384
    depth: int = 12
    heads: int = 6
    mlp_ratio: float = 4.0
    num_classes: int = 1000
    in_chans: int = 3
    drop_path: float = 0.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    family = "isotropic"

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_blocks(self) -> int:
        return self.depth


@dataclass(frozen=True)
class HierarchicalSpec:
    depths: tuple[int, ...] = (3, 3, 9, 3)
    dims: tuple[int, ...] = (96, 192, 384, 768)
    num_classes: int = 1000
    mlp_ratio: float = 4.0
    image_size: int = 224
    in_chans: int = 3
    layer_scale_init: float = 1e-6
    drop_path: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(self.depths))
        object.__setattr__(self, "dims", tuple(self.dims))
        if len(self.depths) != 4 or len(self.dims) != 4:
            raise ValueError("hierarchical spec needs exactly 4 stages")
        if self.image_size % 32:
            raise ValueError(f"image_size {self.image_size} must be divisible by 32")

    family = "hierarchical"

    @property
    def num_blocks(self) -> int:
        return sum(self.depths)

    def stage_offsets(self) -> list[int]:
        return [int(v) for v in np.cumsum((0,) + self.depths[:-1])]

    def stage_of(self, block: int) -> int:
        return int(np.searchsorted(np.cumsum(self.depths), block, side="right"))


PRESETS: dict[str, IsotropicSpec | HierarchicalSpec] = {
    "vit-s": IsotropicSpec(dim=384, depth=12, heads=6),
    "vit-b": IsotropicSpec(dim=768, depth=12, heads=12),
    "convnext-t": HierarchicalSpec(depths=(3, 3, 9, 3), dims=(96, 192, 384, 768)),
    "convnext-s": HierarchicalSpec(depths=(3, 3, 27, 3), dims=(96, 192, 384, 768)),
    "convnext-b": HierarchicalSpec(depths=(3, 3, 27, 3), dims=(128, 256, 512, 1024)),
    # desk-scale presets, not from any published configuration
    "micro-vit": IsotropicSpec(image_size=32, patch_size=4, dim=64, depth=6, heads=4, num_classes=16),
    "micro-convnext": HierarchicalSpec(depths=(1, 1, 3, 1), dims=(32, 64, 128, 256), num_classes=16,
                                       image_size=32, layer_scale_init=0.1),
}


def get_preset(name: str, **overrides) -> IsotropicSpec | HierarchicalSpec:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    spec = PRESETS[name]
    return dataclasses.replace(spec, **overrides) if overrides else spec


def placement_layers(strategy: str, arch: IsotropicSpec | HierarchicalSpec) -> set[int]:
    """Zero-based indices of the blocks that become MoE blocks."""
    if strategy not in PLACEMENTS:
        raise ValueError(f"unknown placement {strategy!r}; expected one of {PLACEMENTS}")
    if strategy == "none":
        return set()
    if isinstance(arch, IsotropicSpec):
        L = arch.depth
        if strategy == "every2":
            return set(range(1, L, 2))
        if strategy == "last2":
            odd = list(range(1, L, 2))
            return set(odd[-2:])
        raise UnsupportedPlacement(f"placement {strategy!r} is only defined for hierarchical backbones")
    offsets = arch.stage_offsets()
    last = [o + d - 1 for o, d in zip(offsets, arch.depths)]
    if strategy == "every2":
        return {o + i for o, d in zip(offsets, arch.depths) for i in range(1, d, 2)}
    if strategy == "stage":
        return set(last)
    if strategy == "last2":
        return {last[2], last[3]}
    return {last[2], last[3], offsets[2] + arch.depths[2] // 2}


@dataclass
class ModelSpec:
    arch: IsotropicSpec | HierarchicalSpec
    placement: str = "none"
    moe: MoELayerConfig | None = None
    moe_layers: tuple[int, ...] = ()
    param_shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def family(self) -> str:
        return self.arch.family

    def block_dim(self, block: int) -> int:
        if isinstance(self.arch, IsotropicSpec):
            return self.arch.dim
        return self.arch.dims[self.arch.stage_of(block)]

    def moe_for(self, block: int) -> MoELayerConfig | None:
        return self.moe if block in self.moe_layers else None

    def param_role(self, name: str) -> tuple[str, int | None, int | None]:
        """``(kind, block, expert)`` with kind in {"expert", "gate", "other"}."""
        parts = name.split(".")
        if parts[0] == "blocks" and len(parts) > 3 and parts[2] == "moe":
            block = int(parts[1])
            if parts[3] == "experts":
                return "expert", block, int(parts[4])
            return "gate", block, None
        return "other", None, None


def model_spec(arch, placement: str = "none", moe: MoELayerConfig | None = None) -> ModelSpec:
    layers = placement_layers(placement, arch)
    if not layers:
        if moe is not None and placement == "none":
            warnings.warn("placement 'none' ignores the provided MoE configuration", stacklevel=2)
        moe = None
    else:
        moe = dataclasses.replace(moe or MoELayerConfig(),
                                  style="vit" if arch.family == "isotropic" else "convnext")
    spec = ModelSpec(arch=arch, placement=placement, moe=moe, moe_layers=tuple(sorted(int(b) for b in layers)))
    spec.param_shapes = _param_shapes(spec)
    return spec


def _param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    a = spec.arch
    shapes: dict[str, tuple[int, ...]] = {}
    if isinstance(a, IsotropicSpec):
        d = a.dim
        shapes["patch_embed.weight"] = (a.patch_size * a.patch_size * a.in_chans, d)
        shapes["patch_embed.bias"] = (d,)
        shapes["cls_token"] = (1, d)
        shapes["pos_embed"] = (a.grid * a.grid + 1, d)
        for i in range(a.depth):
            for k, v in vit_block_shapes(d, a.mlp_ratio, spec.moe_for(i)).items():
                shapes[f"blocks.{i}.{k}"] = v
        shapes.update({"norm.weight": (d,), "norm.bias": (d,),
                       "head.weight": (d, a.num_classes), "head.bias": (a.num_classes,)})
        return shapes
    dims = a.dims
    shapes["stem.weight"] = (16 * a.in_chans, dims[0])
    shapes["stem.bias"] = (dims[0],)
    shapes["stem_norm.weight"] = (dims[0],)
    shapes["stem_norm.bias"] = (dims[0],)
    block = 0
    for s, depth in enumerate(a.depths):
        if s > 0:
            shapes[f"downsample.{s}.norm.weight"] = (dims[s - 1],)
            shapes[f"downsample.{s}.norm.bias"] = (dims[s - 1],)
            shapes[f"downsample.{s}.weight"] = (4 * dims[s - 1], dims[s])
            shapes[f"downsample.{s}.bias"] = (dims[s],)
        for _ in range(depth):
            for k, v in convnext_block_shapes(dims[s], a.mlp_ratio, spec.moe_for(block)).items():
                shapes[f"blocks.{block}.{k}"] = v
            block += 1
    shapes.update({"norm.weight": (dims[-1],), "norm.bias": (dims[-1],),
                   "head.weight": (dims[-1], a.num_classes), "head.bias": (a.num_classes,)})
    return shapes


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, Tensor]
    seed: int = 0
    gate_skew: float = 0.0

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def config(self) -> dict:
        return {"arch": arch_to_dict(self.spec.arch), "placement": self.spec.placement,
                "moe": moe_to_dict(self.spec.moe), "seed": self.seed, "gate_skew": self.gate_skew}


def _is_norm(name: str) -> bool:
    parts = name.split(".")
    return len(parts) >= 2 and parts[-2] in ("norm", "norm1", "norm2", "stem_norm")


def build_model(arch, placement: str = "none", moe_cfg: MoELayerConfig | None = None, seed: int = 0,
                gate_skew: float = 0.0) -> Model:
    """Materialize parameters deterministically from ``seed``.

    Weights draw from a normal truncated at two standard deviations (std
    0.02), biases start at zero and norms at the identity. ``gate_skew`` adds
    a constant to expert 0's linear-gate bias, for routing-collapse studies.
    """
    if isinstance(arch, str):
        arch = get_preset(arch)
    spec = model_spec(arch, placement, moe_cfg)
    rng = np.random.default_rng(seed)
    dtype = default_dtype()
    params: dict[str, Tensor] = {}
    for name, shape in spec.param_shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            arr = np.full(shape, arch.layer_scale_init)
        elif _is_norm(name):
            arr = np.ones(shape) if leaf == "weight" else np.zeros(shape)
        elif leaf == "bias":
            arr = np.zeros(shape)
        else:
            arr = _trunc_normal(rng, shape)
        if gate_skew and name.endswith("moe.gate.bias"):
            arr[0] += gate_skew
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return Model(spec, params, seed, gate_skew)


# -- forward ----------------------------------------------------------
def _patchify(x: Tensor, p: int) -> Tensor:
    B, H, W, C = x.shape
    x = x.reshape(B, H // p, p, W // p, p, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H // p, W // p, p * p * C)


def _trace_records(out: MoEOutput, layer: int, grid: tuple[int, int], skip: int,
                   image_ids, labels) -> list[TraceRecord]:
    T_all = out.decision.num_tokens // len(image_ids)
    idx = out.decision.topk_indices
    w = out.decision.topk_weights.data
    dropped = out.plan.dropped
    recs = []
    for b, (iid, cid) in enumerate(zip(image_ids, labels)):
        lo = b * T_all + skip
        hi = (b + 1) * T_all
        mask = (dropped[:, 0] >= lo) & (dropped[:, 0] < hi)
        d = dropped[mask].copy()
        d[:, 0] -= lo
        recs.append(TraceRecord(
            image_id=int(iid), class_id=None if cid is None else int(cid), layer_id=layer,
            grid=grid, topk=idx[lo:hi].copy(), weights=w[lo:hi].astype(np.float32),
            num_experts=out.decision.num_experts, dropped=d))
    return recs


def forward_classify(model: Model, images, record_trace: bool = False, training: bool = False,
                     rng: np.random.Generator | None = None, image_ids=None, labels=None):
    """Classify ``images[B, C, H, W]``; returns ``(logits, trace | None, aux_loss)``.

    ``aux_loss`` sums the load-balancing loss over MoE layers. Stochastic
    depth is active only when ``training`` and an ``rng`` are given.
    """
    spec = model.spec
    a = spec.arch
    x = images if isinstance(images, Tensor) else Tensor(images)
    B, C, H, W = x.shape
    if (C, H, W) != (a.in_chans, a.image_size, a.image_size):
        raise ValueError(f"expected images [B, {a.in_chans}, {a.image_size}, {a.image_size}], got {x.shape}")
    p = model.params
    image_ids = list(range(B)) if image_ids is None else list(image_ids)
    labels = [None] * B if labels is None else list(labels)
    dp_rng = rng if training else None
    trace = RoutingTrace() if record_trace else None
    aux = Tensor(0.0)
    L = a.num_blocks
    x = x.transpose(0, 2, 3, 1)

    if isinstance(a, IsotropicSpec):
        g = a.grid
        tok = ops.linear(_patchify(x, a.patch_size).reshape(B, g * g, -1),
                         p["patch_embed.weight"], p["patch_embed.bias"])
        cls = broadcast_to(p["cls_token"].reshape(1, 1, a.dim), (B, 1, a.dim))
        h = concat([cls, tok], axis=1) + p["pos_embed"]
        for i in range(L):
            rate = a.drop_path * i / max(L - 1, 1)
            h, out = vit_block_forward(sub(p, f"blocks.{i}"), h, a.heads, spec.moe_for(i), rate, dp_rng)
            if out is not None:
                aux = aux + out.aux_loss
                if trace is not None:
                    trace.extend(_trace_records(out, i, (g, g), 1, image_ids, labels))
        h = ops.layer_norm(h, p["norm.weight"], p["norm.bias"])
        feat = h[:, 0]
    else:
        h = ops.linear(_patchify(x, 4), p["stem.weight"], p["stem.bias"])
        h = ops.layer_norm(h, p["stem_norm.weight"], p["stem_norm.bias"])
        block = 0
        for s, depth in enumerate(a.depths):
            if s > 0:
                h = ops.layer_norm(h, p[f"downsample.{s}.norm.weight"], p[f"downsample.{s}.norm.bias"])
                h = ops.linear(_patchify(h, 2), p[f"downsample.{s}.weight"], p[f"downsample.{s}.bias"])
            for _ in range(depth):
                rate = a.drop_path * block / max(L - 1, 1)
                h, out = convnext_block_forward(sub(p, f"blocks.{block}"), h, spec.moe_for(block), rate, dp_rng)
                if out is not None:
                    aux = aux + out.aux_loss
                    if trace is not None:
                        trace.extend(_trace_records(out, block, (h.shape[1], h.shape[2]), 0, image_ids, labels))
                block += 1
        feat = ops.layer_norm(h.mean(axis=(1, 2)), p["norm.weight"], p["norm.bias"])
    logits = ops.linear(feat, p["head.weight"], p["head.bias"])
    return logits, trace, aux


# -- config (de)serialization -----------------------------------------
def arch_to_dict(arch) -> dict:
    d = dataclasses.asdict(arch)
    d["family"] = arch.family
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def arch_from_dict(d: dict):
    d = dict(d)
    family = d.pop("family")
    cls = IsotropicSpec if family == "isotropic" else HierarchicalSpec
    return cls(**d)


def moe_to_dict(moe: MoELayerConfig | None) -> dict | None:
    if moe is None:
        return None
    return {"num_experts": moe.num_experts, "top_k": moe.top_k,
            "gate": dataclasses.asdict(moe.gate), "mlp_ratio": moe.mlp_ratio,
            "capacity_factor": moe.capacity.capacity_factor, "style": moe.style,
            "inner_skip": moe.inner_skip}


def moe_from_dict(d: dict | None) -> MoELayerConfig | None:
    if d is None:
        return None
    d = dict(d)
    gate = GateKind(**d.pop("gate", {}))
    cap = CapacityConfig(d.pop("capacity_factor", None))
    return MoELayerConfig(gate=gate, capacity=cap, **d)


# -- checkpoints ------------------------------------------------------
_MAGIC = b"VMOECKPT"
_VERSION = 1


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    """Write named tensors plus the model config to a versioned binary file."""
    entries, blobs, offset = [], [], 0
    for name, t in model.params.items():
        arr = np.ascontiguousarray(t.data)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>|="),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": _VERSION, "config": model.config(), "extra": extra or {},
                         "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_MAGIC + struct.pack("<IQ", _VERSION, len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path) -> tuple[Model, dict]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:8] != _MAGIC:
        raise ValueError(f"{path}: not a visionmoe checkpoint")
    version, hlen = struct.unpack("<IQ", buf[8:20])
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(buf[20:20 + hlen])
    base = 20 + hlen
    cfg = header["config"]
    spec = model_spec(arch_from_dict(cfg["arch"]), cfg["placement"], moe_from_dict(cfg["moe"]))
    params = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(buf[start:start + e["nbytes"]], dtype=np.dtype("<" + e["dtype"])).reshape(e["shape"])
        params[e["name"]] = Tensor(arr.copy(), requires_grad=True, dtype=arr.dtype)
    if list(params) != list(spec.param_shapes):
        raise ValueError(f"{path}: tensor names do not match the stored config")
    return Model(spec, params, cfg.get("seed", 0), cfg.get("gate_skew", 0.0)), header.get("extra", {})
