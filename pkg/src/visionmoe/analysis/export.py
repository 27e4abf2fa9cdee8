"""CSV / JSON / SVG export of usage statistics and Pareto fronts.

CSV layouts (floats written with ``repr`` so they re-read exactly):

* ``similarity_L{l}.csv``: ``expert,e0,...,e{N-1}``, one row per expert.
* ``occurrence_L{l}.csv``: ``expert,c0,...,c{C-1}``, top-1 counts per class.
* ``spatial_L{l}.csv``: ``row,col,e0,...``, top-1 frequency per position.
* ``cdf_L{l}.csv``: ``expert,patches,cumulative_fraction``.
* ``images_L{l}.csv``: ``image_id,class_id,experts_top1,experts_touched,dropped,e0,...``
  with the per-image assigned-choice counts.
* ``pareto.csv``: ``tag,activated_params,accuracy,on_front``.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import plotting
from .stats import (
    UsageStats,
    class_occurrence,
    expert_similarity,
    spatial_map,
    usage_cdf,
)

FORMATS = ("csv", "json", "svg")


def _num(v):
    if isinstance(v, (int, np.integer)):
        return int(v)
    return repr(float(v))


def _open(path: Path, mode="w"):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, mode, newline="")
    except OSError as exc:
        raise OSError(f"cannot open {path}: {exc}") from exc


def write_matrix_csv(path, matrix: np.ndarray, row_name: str, col_prefix: str) -> Path:
    path = Path(path)
    m = np.asarray(matrix)
    with _open(path) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([row_name] + [f"{col_prefix}{j}" for j in range(m.shape[1])])
        for i, row in enumerate(m):
            w.writerow([i] + [_num(v) for v in row])
    return path


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=float)


def _layer_tables(stats: UsageStats, layer: int) -> dict:
    ls = stats[layer]
    tables: dict = {"similarity": expert_similarity(ls)}
    if ls.class_ids is not None:
        tables["occurrence"] = class_occurrence(ls)
    if ls.grid is not None and len(ls.grid) == 2:
        tables["spatial"] = spatial_map(ls)
    tables["cdf"] = {e: usage_cdf(ls, None, e) for e in range(ls.num_experts)}
    return tables


def export_stats(stats: UsageStats, out_dir, fmt: str = "csv", layer: int | None = None) -> list[Path]:
    """Write one file set per layer (or just ``layer``) into ``out_dir``."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    out = Path(out_dir)
    layers = [layer] if layer is not None else stats.layer_ids()
    written: list[Path] = []
    for l in layers:
        ls = stats[l]
        t = _layer_tables(stats, l)
        if fmt == "csv":
            written.append(write_matrix_csv(out / f"similarity_L{l}.csv", t["similarity"], "expert", "e"))
            if "occurrence" in t:
                written.append(write_matrix_csv(out / f"occurrence_L{l}.csv", t["occurrence"], "expert", "c"))
            if "spatial" in t:
                written.append(_write_spatial_csv(out / f"spatial_L{l}.csv", t["spatial"]))
            written.append(_write_cdf_csv(out / f"cdf_L{l}.csv", t["cdf"]))
            written.append(_write_images_csv(out / f"images_L{l}.csv", ls))
        elif fmt == "json":
            doc = {
                "layer_id": l, "num_experts": ls.num_experts, "k": ls.k,
                "tokens_per_image": ls.tokens_per_image, "num_images": ls.num_images,
                "similarity": t["similarity"].tolist(),
                "experts_per_image": ls.experts_per_image().tolist(),
                "experts_touched_per_image": ls.experts_touched_per_image().tolist(),
                "usage_fraction": ls.usage_fraction().tolist(),
                "cdf": {str(e): {"patches": c.values.tolist(), "fraction": c.fractions.tolist()}
                        for e, c in t["cdf"].items()},
            }
            if "occurrence" in t:
                doc["occurrence"] = t["occurrence"].tolist()
            if "spatial" in t:
                doc["spatial"] = t["spatial"].tolist()
            path = out / f"analysis_L{l}.json"
            with _open(path) as f:
                json.dump(doc, f, indent=1, sort_keys=True)
            written.append(path)
        else:
            written.append(plotting.heatmap(t["similarity"], out / f"similarity_L{l}.svg",
                                            title=f"expert similarity, layer {l}", xlabel="expert",
                                            ylabel="expert", vmin=0.0, vmax=1.0))
            if "occurrence" in t:
                written.append(plotting.heatmap(t["occurrence"], out / f"occurrence_L{l}.svg",
                                                title=f"per-class occurrence, layer {l}", xlabel="class id",
                                                ylabel="expert", cmap="Blues"))
            if "spatial" in t:
                written.append(plotting.spatial_panels(t["spatial"], out / f"spatial_L{l}.svg",
                                                       title=f"spatial distribution, layer {l}"))
            written.append(plotting.cdf_plot(t["cdf"], ls.tokens_per_image, out / f"cdf_L{l}.svg",
                                             title=f"patches per active image, layer {l}"))
    return written


def _write_spatial_csv(path: Path, freq: np.ndarray) -> Path:
    H, W, N = freq.shape
    with _open(path) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["row", "col"] + [f"e{e}" for e in range(N)])
        for r in range(H):
            for c in range(W):
                w.writerow([r, c] + [_num(v) for v in freq[r, c]])
    return path


def read_spatial_csv(path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))[1:]
    H = max(int(r[0]) for r in rows) + 1
    W = max(int(r[1]) for r in rows) + 1
    freq = np.zeros((H, W, len(rows[0]) - 2))
    for r in rows:
        freq[int(r[0]), int(r[1])] = [float(v) for v in r[2:]]
    return freq


def _write_cdf_csv(path: Path, cdfs: dict) -> Path:
    with _open(path) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["expert", "patches", "cumulative_fraction"])
        for e, c in sorted(cdfs.items()):
            for v, frac in zip(c.values, c.fractions):
                w.writerow([e, int(v), _num(frac)])
    return path


def _write_images_csv(path: Path, ls) -> Path:
    top1 = ls.experts_per_image()
    touched = ls.experts_touched_per_image()
    with _open(path) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["image_id", "class_id", "experts_top1", "experts_touched", "dropped"]
                   + [f"e{e}" for e in range(ls.num_experts)])
        for i in range(ls.num_images):
            cid = "" if ls.class_ids is None else int(ls.class_ids[i])
            w.writerow([int(ls.image_ids[i]), cid, int(top1[i]), int(touched[i]), int(ls.dropped[i])]
                       + [int(c) for c in ls.counts[i]])
    return path


def export_front(points, front, out_dir, fmt: str = "csv", name: str = "pareto") -> Path:
    """Write all points with an ``on_front`` flag, or the front figure for svg."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    out = Path(out_dir)
    on = {id(p) for p in front}
    if fmt == "svg":
        return plotting.pareto_plot(points, front, out / f"{name}.svg", title="Pareto front")
    if fmt == "json":
        path = out / f"{name}.json"
        with _open(path) as f:
            json.dump([{"tag": p[2], "activated_params": p[0], "accuracy": p[1], "on_front": id(p) in on}
                       for p in points], f, indent=1)
        return path
    path = out / f"{name}.csv"
    with _open(path) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["tag", "activated_params", "accuracy", "on_front"])
        for p in points:
            w.writerow([p[2], _num(p[0]), _num(p[1]), int(id(p) in on)])
    return path
