"""Desk-scale supervised training: synthetic data, AdamW, cosine schedule.

The objective is ``cross_entropy + balance_weight * aux`` where ``aux`` sums
the load-balancing losses of all MoE layers. Every source of randomness has
its own seed-derived stream (data order, stochastic depth), so a run is a
pure function of its configuration, seed and thread count.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .analysis.stats import collect_stats
from .analysis.trace import RoutingTrace
from .backbones import Model, forward_classify, save_checkpoint
from .routing import CapacityConfig
from .tensor import Tensor, backward, default_dtype, no_grad, set_precision

# stream tags mixed into the seed for each purpose
_DATA_STREAM = 0xDA7A
_DROP_STREAM = 0xD809


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: Path | None):
        where = f"; last good checkpoint at {checkpoint}" if checkpoint else ""
        super().__init__(f"loss became non-finite at step {step}{where}")
        self.step = step
        self.checkpoint = checkpoint


class NonFiniteGradient(FloatingPointError):
    pass


# -- configuration ----------------------------------------------------
@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 32
    lr: float = 1e-3
    warmup_steps: int = 25
    lr_schedule: str = "cosine"          # "cosine" | "constant"
    min_lr: float = 0.0
    weight_decay: float = 0.05
    expert_weight_decay: float | None = None   # None: twice weight_decay
    balance_weight: float = 0.01
    label_smoothing: float = 0.0
    seed: int = 0
    capacity_factor: float | None = None       # overrides the model's MoE capacity when set
    precision: str = "ref64"
    eval_every: int = 100
    eval_batch_size: int = 128
    checkpoint_every: int = 0                  # 0: final checkpoint only
    clip_grad_norm: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.lr < 0 or self.min_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if not 0 <= self.warmup_steps <= self.steps:
            raise ValueError(f"warmup_steps must lie in [0, steps], got {self.warmup_steps} with steps={self.steps}")
        if self.balance_weight < 0:
            raise ValueError("balance_weight must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.precision not in ("ref64", "fast32"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    @property
    def resolved_expert_weight_decay(self) -> float:
        return 2.0 * self.weight_decay if self.expert_weight_decay is None else self.expert_weight_decay

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate used for update ``step`` (zero-based)."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if cfg.lr_schedule == "constant":
        return cfg.lr
    span = max(cfg.steps - cfg.warmup_steps, 1)
    t = min(step - cfg.warmup_steps, span) / span
    return cfg.min_lr + (cfg.lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * t))


# -- synthetic data ---------------------------------------------------
@dataclass
class SyntheticDataset:
    num_classes: int
    per_class: int
    image_size: int
    seed: int
    train_images: np.ndarray      # [n, 3, S, S] float32 in [0, 1]
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    prototypes: np.ndarray        # [C, 2, 2, 3] quadrant colours

    @property
    def num_train(self) -> int:
        return len(self.train_labels)

    @property
    def num_test(self) -> int:
        return len(self.test_labels)


def _spread_codes(C: int, rng: np.random.Generator) -> np.ndarray:
    """Pick ``C`` distinct 12-bit codes by greedy farthest-point selection."""
    codes = ((np.arange(4096)[:, None] >> np.arange(12)) & 1).astype(np.int8)
    order = rng.permutation(4096)
    chosen = [order[0]]
    dist = np.abs(codes - codes[order[0]]).sum(axis=1)
    for _ in range(C - 1):
        # ties broken by the random order
        nxt = order[np.argmax(dist[order])]
        chosen.append(nxt)
        dist = np.minimum(dist, np.abs(codes - codes[nxt]).sum(axis=1))
    return codes[chosen]


def _render(protos: np.ndarray, labels: np.ndarray, size: int, textures: np.ndarray,
            rng: np.random.Generator, noise: float) -> np.ndarray:
    n = len(labels)
    half = size // 2
    base = protos[labels] + rng.normal(0.0, 0.04, size=(n, 2, 2, 3))
    img = np.repeat(np.repeat(base, half, axis=1), half, axis=2)       # [n, S, S, 3]
    phase = rng.uniform(0.0, 2 * np.pi, size=(n, 1, 1))
    tex = 0.08 * np.sin(textures[labels] + phase)
    img = img + tex[..., None] + rng.normal(0.0, 0.03, size=(n, 1, 1, 1))
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).transpose(0, 3, 1, 2).astype(np.float32)


def make_synthetic(num_classes: int, per_class: int, size: int = 32, seed: int = 0,
                   test_per_class: int | None = None, noise: float = 0.1) -> SyntheticDataset:
    """Balanced classes built from quadrant colour prototypes plus an oriented texture.

    Each class owns a 2x2 grid of colours (every channel low or high), chosen
    to be far apart in Hamming distance, and a sinusoidal grating with its own
    orientation. Samples add colour jitter, a random grating phase, a global
    brightness shift and pixel noise. Train and test draw from separate
    seed-derived streams.
    """
    if num_classes < 2:
        raise ValueError("make_synthetic needs at least 2 classes")
    if size % 2:
        raise ValueError("image size must be even")
    test_per_class = per_class if test_per_class is None else test_per_class
    proto_ss, train_ss, test_ss = np.random.SeedSequence(seed).spawn(3)
    prng = np.random.default_rng(proto_ss)
    codes = _spread_codes(num_classes, prng)
    protos = (0.2 + 0.6 * codes).reshape(num_classes, 2, 2, 3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    theta = np.pi * np.arange(num_classes) / num_classes
    freq = 2 * np.pi * prng.choice([2.0, 3.0, 4.0], size=num_classes)
    textures = freq[:, None, None] * (np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy)

    def split(ss, m):
        rng = np.random.default_rng(ss)
        labels = np.repeat(np.arange(num_classes), m)
        labels = labels[rng.permutation(len(labels))]
        return _render(protos, labels, size, textures, rng, noise), labels.astype(np.int64)

    xtr, ytr = split(train_ss, per_class)
    xte, yte = split(test_ss, test_per_class)
    return SyntheticDataset(num_classes, per_class, size, seed, xtr, ytr, xte, yte, protos)


# -- optimizer --------------------------------------------------------
def is_expert_param(name: str) -> bool:
    return ".moe.experts." in name


def decays(name: str, p: Tensor) -> bool:
    """Biases, norm affines and layer-scale vectors (all 1-D) are not decayed."""
    return p.ndim >= 2


class AdamW:
    """Adaptive moments with decoupled weight decay; experts get their own rate."""

    def __init__(self, named_params, weight_decay: float = 0.0, expert_weight_decay: float | None = None,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params: dict[str, Tensor] = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        ewd = weight_decay if expert_weight_decay is None else expert_weight_decay
        self.decay = {n: (ewd if is_expert_param(n) else weight_decay) if decays(n, p) else 0.0
                      for n, p in self.params.items()}
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.t = 0

    @classmethod
    def from_config(cls, model: Model, cfg: TrainConfig) -> AdamW:
        return cls(model.named_parameters(), cfg.weight_decay, cfg.resolved_expert_weight_decay,
                   cfg.beta1, cfg.beta2, cfg.eps)

    def step(self, lr: float, grads: dict[str, np.ndarray | None] | None = None) -> None:
        """Apply one update; ``grads`` defaults to each parameter's ``.grad`` (None counts as zero)."""
        if grads is None:
            grads = {n: p.grad for n, p in self.params.items()}
        for n, g in grads.items():
            if g is not None and not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient for parameter {n!r} at update {self.t + 1}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for n, p in self.params.items():
            g = grads.get(n)
            m, v = self.m[n], self.v[n]
            m *= b1
            v *= b2
            if g is not None:
                m += (1.0 - b1) * g
                v += (1.0 - b2) * g * g
            if self.decay[n]:
                p.data *= 1.0 - lr * self.decay[n]
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


def optimizer_step(opt: AdamW, cfg: TrainConfig, step_index: int,
                   grads: dict[str, np.ndarray | None] | None = None) -> float:
    """Update with the scheduled learning rate for ``step_index``; returns that rate."""
    lr = lr_at(cfg, step_index)
    opt.step(lr, grads)
    return lr


def clip_grads(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# -- evaluation -------------------------------------------------------
@dataclass
class EvalResult:
    accuracy: float
    aux_loss: float
    num_images: int
    usage: dict[int, list[float]] = field(default_factory=dict)
    trace: RoutingTrace | None = None

    def usage_ratio(self) -> dict[int, float | None]:
        """Per-layer max/min usage; None when some expert receives nothing."""
        out: dict[int, float | None] = {}
        for layer, u in self.usage.items():
            lo = min(u)
            out[layer] = max(u) / lo if lo > 0 else None
        return out

    def summary(self) -> dict:
        return {"accuracy": self.accuracy, "aux_loss": self.aux_loss, "num_images": self.num_images,
                "usage": {str(k): v for k, v in self.usage.items()},
                "usage_ratio": {str(k): v for k, v in self.usage_ratio().items()}}


def _batch(images: np.ndarray, idx) -> Tensor:
    return Tensor(images[idx].astype(default_dtype()))


def evaluate(model: Model, dataset: SyntheticDataset, split: str = "test", batch_size: int = 128,
             keep_trace: bool = False) -> EvalResult:
    """Top-1 accuracy, image-weighted mean aux loss and per-layer expert usage."""
    images = dataset.test_images if split == "test" else dataset.train_images
    labels = dataset.test_labels if split == "test" else dataset.train_labels
    n = len(labels)
    correct = 0
    aux_sum = 0.0
    trace = RoutingTrace()
    record = bool(model.spec.moe_layers)
    with no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            logits, tr, aux = forward_classify(model, _batch(images, idx), record_trace=record,
                                               image_ids=idx.tolist(), labels=labels[idx].tolist())
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
            aux_sum += float(aux.data) * len(idx)
            if tr is not None:
                trace.extend(tr.records)
    usage: dict[int, list[float]] = {}
    if record and len(trace):
        stats = collect_stats(trace, num_experts=model.spec.moe.num_experts)
        usage = {l: [float(u) for u in stats[l].usage_fraction()] for l in stats.layer_ids()}
    return EvalResult(correct / n, aux_sum / n, n, usage, trace if keep_trace else None)


# -- training loop ----------------------------------------------------
@dataclass
class TrainResult:
    log: list[dict]
    final_eval: EvalResult
    steps_done: int
    checkpoints: list[Path] = field(default_factory=list)


def loss_terms(model: Model, images: Tensor, labels: np.ndarray, cfg: TrainConfig,
               rng: np.random.Generator | None = None, training: bool = True):
    """``(total, ce, aux)`` tensors for one batch."""
    logits, _, aux = forward_classify(model, images, training=training, rng=rng)
    ce = ops.cross_entropy(logits, labels, cfg.label_smoothing)
    total = ce + cfg.balance_weight * aux if model.spec.moe_layers else ce
    return total, ce, aux, logits


def _apply_precision(model: Model, precision: str) -> None:
    set_precision(precision)
    dt = default_dtype()
    for p in model.parameters():
        if p.data.dtype != dt:
            p.data = p.data.astype(dt)


def _apply_capacity(model: Model, cf: float | None) -> None:
    spec = model.spec
    if cf is None or spec.moe is None:
        return
    model.spec = dataclasses.replace(spec, moe=dataclasses.replace(spec.moe, capacity=CapacityConfig(cf)))


def _write_line(fh, rec: dict) -> None:
    fh.write(json.dumps(rec, sort_keys=True) + "\n")
    fh.flush()


def train(model: Model, dataset: SyntheticDataset, cfg: TrainConfig, out_dir=None,
          keep_final_trace: bool = False) -> TrainResult:
    """Run ``cfg.steps`` updates, evaluating on the test split every ``eval_every`` steps.

    With ``out_dir`` set, writes ``log.jsonl`` (one record per eval point),
    checkpoints under ``checkpoints/`` and the final test routing trace under
    ``traces/``. Raises :class:`TrainingDiverged` if the loss stops being
    finite, after saving the last finite parameters.
    """
    _apply_precision(model, cfg.precision)
    _apply_capacity(model, cfg.capacity_factor)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    log: list[dict] = []
    ckpts: list[Path] = []
    fh = open(out / "log.jsonl", "w") if out is not None else None
    data_rng = np.random.default_rng([cfg.seed, _DATA_STREAM])
    drop_rng = np.random.default_rng([cfg.seed, _DROP_STREAM])
    opt = AdamW.from_config(model, cfg)
    params = model.parameters()
    n = dataset.num_train
    order = data_rng.permutation(n)
    cursor = 0
    window = {"total": 0.0, "ce": 0.0, "aux": 0.0, "correct": 0, "seen": 0, "steps": 0}
    good = [p.data.copy() for p in params]

    def checkpoint(name: str, step: int, snapshot=None) -> Path:
        path = out / "checkpoints" / name
        if snapshot is not None:
            live = [p.data for p in params]
            for p, s in zip(params, snapshot):
                p.data = s
            try:
                save_checkpoint(model, path, {"step": step, "train": cfg.to_dict()})
            finally:
                for p, s in zip(params, live):
                    p.data = s
        else:
            save_checkpoint(model, path, {"step": step, "train": cfg.to_dict()})
        ckpts.append(path)
        return path

    def eval_point(step: int, last: dict) -> EvalResult:
        ev = evaluate(model, dataset, "test", cfg.eval_batch_size)
        k = max(window["steps"], 1)
        rec = {
            "step": step,
            "epoch": step * cfg.batch_size / n,
            "lr": last.get("lr", 0.0),
            "loss": last.get("total", float("nan")),
            "ce": last.get("ce", float("nan")),
            "aux": last.get("aux", 0.0),
            "train_loss": window["total"] / k,
            "train_ce": window["ce"] / k,
            "train_aux": window["aux"] / k,
            "train_acc": window["correct"] / max(window["seen"], 1),
            "test_acc": ev.accuracy,
            "test_aux": ev.aux_loss,
            "usage": {str(l): u for l, u in ev.usage.items()},
            "usage_ratio": {str(l): r for l, r in ev.usage_ratio().items()},
        }
        log.append(rec)
        if fh is not None:
            _write_line(fh, rec)
        for key in window:
            window[key] = 0 if isinstance(window[key], int) else 0.0
        return ev

    ev = None
    last: dict = {}
    try:
        if cfg.steps == 0:
            ev = eval_point(0, last)
        for step in range(cfg.steps):
            if cursor + cfg.batch_size > n:
                order = data_rng.permutation(n)
                cursor = 0
            idx = order[cursor:cursor + cfg.batch_size]
            cursor += cfg.batch_size
            model.zero_grad()
            total, ce, aux, logits = loss_terms(model, _batch(dataset.train_images, idx),
                                                dataset.train_labels[idx], cfg, drop_rng)
            tval = float(total.data)
            if not math.isfinite(tval):
                path = checkpoint("last_good.ckpt", step, good) if out is not None else None
                raise TrainingDiverged(step, path)
            backward(total)
            if cfg.clip_grad_norm is not None:
                clip_grads(params, cfg.clip_grad_norm)
            good = [p.data.copy() for p in params]
            try:
                lr = optimizer_step(opt, cfg, step)
            except NonFiniteGradient as exc:
                path = checkpoint("last_good.ckpt", step, good) if out is not None else None
                raise TrainingDiverged(step, path) from exc
            last = {"lr": lr, "total": tval, "ce": float(ce.data), "aux": float(aux.data)}
            window["total"] += tval
            window["ce"] += last["ce"]
            window["aux"] += last["aux"]
            window["correct"] += int((logits.data.argmax(axis=1) == dataset.train_labels[idx]).sum())
            window["seen"] += len(idx)
            window["steps"] += 1
            done = step + 1
            if done % cfg.eval_every == 0 or done == cfg.steps:
                ev = eval_point(done, last)
            if out is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done != cfg.steps:
                checkpoint(f"step_{done:06d}.ckpt", done)
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        checkpoint("final.ckpt", cfg.steps)
    if keep_final_trace or out is not None:
        full = evaluate(model, dataset, "test", cfg.eval_batch_size, keep_trace=True)
        if out is not None and full.trace is not None and len(full.trace):
            full.trace.save(out / "traces" / "test_final.jsonl")
        ev = full
    return TrainResult(log, ev, cfg.steps, ckpts)
