"""Routing traces: per (image, layer) records of token-to-expert choices.

On disk a trace is JSON lines, one record per (image, layer)::

    {"image_id": 0, "class_id": 3, "layer_id": 5, "grid": [8, 8],
     "topk": [[2, 0], ...], "weights": [[0.61, 0.2], ...],
     "num_experts": 4, "dropped": [[17, 1]]}

``num_experts`` and ``dropped`` are optional; ``dropped`` lists
(token, choice rank) pairs that lost their slot to capacity limits.
Weights are stored at 32-bit precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np


@dataclass
class TraceRecord:
    image_id: int
    class_id: int | None
    layer_id: int
    grid: tuple[int, ...] | None
    topk: np.ndarray
    weights: np.ndarray | None = None
    num_experts: int | None = None
    dropped: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.intp))

    def __post_init__(self):
        self.topk = np.asarray(self.topk, dtype=np.intp)
        if self.topk.ndim == 1:
            self.topk = self.topk[:, None]
        self.dropped = np.asarray(self.dropped, dtype=np.intp).reshape(-1, 2)
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float32).reshape(self.topk.shape)
        if self.grid is not None:
            self.grid = tuple(int(g) for g in self.grid)
            if int(np.prod(self.grid)) != self.num_tokens:
                raise ValueError(f"trace record grid {self.grid} does not match {self.num_tokens} tokens")
        if self.num_experts is not None and self.topk.size and self.topk.max() >= self.num_experts:
            raise ValueError(f"expert index {self.topk.max()} out of range for N={self.num_experts}")

    @property
    def num_tokens(self) -> int:
        return self.topk.shape[0]

    @property
    def k(self) -> int:
        return self.topk.shape[1]

    def assigned_mask(self) -> np.ndarray:
        """``[T, k]`` boolean: choice survived dispatch."""
        mask = np.ones(self.topk.shape, dtype=bool)
        if len(self.dropped):
            mask[self.dropped[:, 0], self.dropped[:, 1]] = False
        return mask

    def to_json(self) -> dict:
        rec = {"image_id": self.image_id, "class_id": self.class_id, "layer_id": self.layer_id,
               "grid": None if self.grid is None else list(self.grid),
               "topk": self.topk.tolist()}
        if self.weights is not None:
            rec["weights"] = [[float(v) for v in row] for row in self.weights]
        if self.num_experts is not None:
            rec["num_experts"] = self.num_experts
        if len(self.dropped):
            rec["dropped"] = self.dropped.tolist()
        return rec

    @classmethod
    def from_json(cls, rec: dict) -> TraceRecord:
        return cls(image_id=rec["image_id"], class_id=rec.get("class_id"), layer_id=rec["layer_id"],
                   grid=rec.get("grid"), topk=rec["topk"], weights=rec.get("weights"),
                   num_experts=rec.get("num_experts"), dropped=rec.get("dropped", []))


class RoutingTrace:
    """An ordered collection of :class:`TraceRecord`."""

    def __init__(self, records: Iterable[TraceRecord] = ()):
        self.records: list[TraceRecord] = list(records)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TraceRecord]:
        return iter(self.records)

    def append(self, rec: TraceRecord) -> None:
        self.records.append(rec)

    def extend(self, recs: Iterable[TraceRecord]) -> None:
        self.records.extend(recs)

    def layers(self) -> list[int]:
        return sorted({r.layer_id for r in self.records})

    def for_layer(self, layer: int) -> list[TraceRecord]:
        return [r for r in self.records if r.layer_id == layer]

    def merge(self, other: RoutingTrace) -> RoutingTrace:
        recs = sorted(self.records + other.records, key=lambda r: (r.image_id, r.layer_id))
        return RoutingTrace(recs)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps(r.to_json(), separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path) -> RoutingTrace:
        with open(path) as f:
            return cls(TraceRecord.from_json(json.loads(line)) for line in f if line.strip())
