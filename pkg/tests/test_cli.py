import csv
import json

import pytest

from oracles import pareto_bruteforce
from visionmoe.cli import SWEEP_COLUMNS, expand_grid, improvement_table, main, run_report, run_sweep
from visionmoe.config import ConfigError, RunConfig

TINY_ARCH = {"image_size": 16, "patch_size": 4, "dim": 16, "depth": 2, "heads": 2, "num_classes": 4}
TINY_DATA = {"num_classes": 4, "per_class": 8, "test_per_class": 4}
TINY_TRAIN = {"steps": 3, "batch_size": 8, "warmup_steps": 1, "eval_every": 3, "eval_batch_size": 16}


def tiny_doc(**kw):
    doc = {"preset": "micro-vit", "arch": dict(TINY_ARCH), "data": dict(TINY_DATA), "train": dict(TINY_TRAIN)}
    doc.update(kw)
    return doc


def write(path, doc):
    path.write_text(json.dumps(doc))
    return path


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# -- config -----------------------------------------------------------
def test_config_defaults_resolve():
    cfg = RunConfig.from_dict({"placement": "last2", "moe": {"num_experts": 2}})
    m = cfg.resolved_moe()
    assert m["num_experts"] == 2 and m["top_k"] == 1 and m["gate"]["kind"] == "linear"
    assert RunConfig().resolved_moe() is None
    assert RunConfig.from_dict(cfg.to_dict()).config_hash() == cfg.config_hash()


@pytest.mark.parametrize("doc", [
    {"placment": "last2"},
    {"train": {"stepz": 3}},
    {"moe": {"experts": 4}},
    {"moe": {"gate": {"kind": "linear", "temp": 1.0}}},
    {"data": {"classes": 3}},
])
def test_unknown_keys_are_errors(doc):
    with pytest.raises(ConfigError, match="unknown config key"):
        RunConfig.from_dict(doc)


def test_invalid_values_are_config_errors():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"version": 99})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"placement": "stage"})             # isotropic backbone
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"placement": "last2", "moe": {"num_experts": 2, "top_k": 3}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"seed": 1, "train": {"seed": 2}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"arch": {"depthh": 3}})


def test_hash_and_tag():
    a = RunConfig.from_dict(tiny_doc(placement="last2", moe={"num_experts": 4, "mlp_ratio": 2}))
    b = a.with_values({"moe.num_experts": 2})
    assert a.config_hash() != b.config_hash() and len(a.config_hash()) == 12
    assert a.tag() == "micro-vit-4-last2-k1-r2"
    assert a.with_values({"seed": 3}).train.seed == 3
    assert RunConfig.from_dict(tiny_doc()).tag() == "micro-vit"


def test_save_load_round_trip(tmp_path):
    cfg = RunConfig.from_dict(tiny_doc(placement="every2", moe={"gate": {"kind": "cosine"}}))
    back = RunConfig.load(cfg.save(tmp_path / "c.json"))
    assert back.to_dict() == cfg.to_dict()
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "bad.json")


def test_grid_expansion_distinct_hashes():
    doc = {"base": tiny_doc(placement="last2"),
           "axes": {"moe.num_experts": [2, 4], "moe.top_k": [1, 2]}}
    cells = expand_grid(doc)
    assert len(cells) == 4 and len({c.config_hash() for c in cells}) == 4
    # duplicate values collapse to one cell
    assert len(expand_grid({"base": tiny_doc(), "axes": {"seed": [0, 0, 1]}})) == 2
    with pytest.raises(ConfigError):
        expand_grid({"base": {}, "axez": {}})
    with pytest.raises(ConfigError):
        expand_grid({"base": {}, "axes": {"seed": []}})


# -- count ------------------------------------------------------------
def test_count_vit_s(capsys, tmp_path):
    assert main(["count", "--preset", "vit-s", "--json", "--out", str(tmp_path)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert abs(doc["total_params"] / 1e6 - 22.0) <= 0.22
    assert json.loads((tmp_path / "count.json").read_text()) == doc


def test_count_convnext_moe(capsys):
    assert main(["count", "--preset", "convnext-t", "--placement", "last2", "--experts", "4",
                 "--topk", "1", "--mlp-ratio", "2", "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert abs(doc["total_params"] / 1e6 - 34.5) <= 0.345
    assert abs(doc["activated_params_per_token"] / 1e6 - 25.6) <= 0.256


def test_count_vit_b_every2(capsys):
    assert main(["count", "--preset", "vit-b", "--placement", "every2", "--experts", "8", "--json"]) == 0
    assert abs(json.loads(capsys.readouterr().out)["total_params"] / 1e6 - 284.9) <= 2.849


def test_count_table_output(capsys):
    assert main(["count", "--preset", "convnext-t"]) == 0
    out = capsys.readouterr().out
    assert "#Params" in out and "28.6" in out and "4.5G" in out


def test_count_verify_paper(capsys, tmp_path):
    assert main(["count", "--verify-paper", "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) >= 10 and all(line.startswith("PASS") for line in lines)
    assert all(r["ok"] for r in json.loads((tmp_path / "verify_paper.json").read_text()))


def test_count_verify_paper_failure_exit_code(monkeypatch):
    import visionmoe.cli as cli
    from visionmoe.accounting import PaperTarget
    monkeypatch.setattr(cli, "PAPER_TARGETS", (PaperTarget("wrong", "vit-s", "params", 50.0, 0.01),))
    assert main(["count", "--verify-paper"]) == 2


@pytest.mark.parametrize("argv", [["count"], ["count", "--preset", "resnet"], ["count", "--bogus"],
                                  ["train", "--config", "/nonexistent.json"], ["--threads", "0", "count"],
                                  ["count", "--preset", "vit-s", "--placement", "stage"]])
def test_user_errors_exit_1(argv, capsys):
    assert main(argv) == 1


# -- train ------------------------------------------------------------
def test_train_writes_run_layout(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", tiny_doc(placement="last2", moe={"num_experts": 2}))
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(run), "--steps", "2"]) == 0
    for p in ("config.json", "log.jsonl", "checkpoints/final.ckpt", "traces/test_final.jsonl",
              "reports/result.json"):
        assert (run / p).exists(), p
    written = RunConfig.load(run / "config.json")
    assert written.train.steps == 2 and written.resolved_moe()["num_experts"] == 2
    result = json.loads((run / "reports" / "result.json").read_text())
    assert result["hash"] == written.config_hash() and result["steps"] == 2


def test_train_is_reproducible_from_written_config(tmp_path):
    cfg = write(tmp_path / "c.json", tiny_doc(placement="last2"))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "4"]) == 0
    assert main(["train", "--config", str(tmp_path / "a" / "config.json"), "--out", str(tmp_path / "b")]) == 0
    for p in ("log.jsonl", "checkpoints/final.ckpt", "config.json"):
        assert (tmp_path / "a" / p).read_bytes() == (tmp_path / "b" / p).read_bytes()


def test_train_divergence_exit_3(tmp_path):
    doc = tiny_doc()
    doc["train"] = dict(TINY_TRAIN, lr=1e300, warmup_steps=0, weight_decay=0.0)
    cfg = write(tmp_path / "c.json", doc)
    with pytest.warns(RuntimeWarning):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 3
    assert (tmp_path / "run" / "checkpoints" / "last_good.ckpt").exists()


def test_train_class_mismatch_is_user_error(tmp_path):
    doc = tiny_doc()
    doc["data"] = dict(TINY_DATA, num_classes=5)
    assert main(["train", "--config", str(write(tmp_path / "c.json", doc)), "--out", str(tmp_path / "r")]) == 1


# -- sweep and report -------------------------------------------------
@pytest.fixture(scope="module")
def sweep_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    grid = {"base": tiny_doc(placement="last2", moe={"mlp_ratio": 2}),
            "axes": {"moe.num_experts": [2, 4], "moe.top_k": [1, 2]}}
    summary = run_sweep(grid, out)
    assert summary == {**summary, "cells": 4, "trained": 4, "failed": 0}
    return out, grid


def test_sweep_table_rows(sweep_dir):
    out, _ = sweep_dir
    rows = read_csv(out / "sweep.csv")
    assert len(rows) == 4 and len({r["hash"] for r in rows}) == 4
    assert list(rows[0]) == list(SWEEP_COLUMNS)
    assert {(r["num_experts"], r["top_k"]) for r in rows} == {("2", "1"), ("2", "2"), ("4", "1"), ("4", "2")}
    for r in rows:
        assert (out / "runs" / r["hash"] / "reports" / "result.json").exists()


def test_sweep_rerun_trains_nothing(sweep_dir):
    out, grid = sweep_dir
    before = (out / "sweep.csv").read_bytes()
    summary = run_sweep(grid, out)
    assert summary["trained"] == 0 and summary["cells"] == 4
    assert (out / "sweep.csv").read_bytes() == before


def test_one_cell_sweep_equals_single_run(tmp_path):
    base = tiny_doc(placement="last2")
    run_sweep({"base": base, "axes": {}}, tmp_path / "sw")
    (cell,) = list((tmp_path / "sw" / "runs").iterdir())
    cfg = write(tmp_path / "c.json", base)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "single")]) == 0
    for p in ("config.json", "log.jsonl", "checkpoints/final.ckpt"):
        assert (cell / p).read_bytes() == (tmp_path / "single" / p).read_bytes()
    assert cell.name == RunConfig.load(cfg).config_hash()


def test_sweep_isolates_failed_cells(tmp_path):
    # the huge learning rate diverges on the first update
    grid = {"base": tiny_doc(placement="last2"), "axes": {"train.lr": [1e-3, 1e300]}}
    with pytest.warns(RuntimeWarning):
        summary = run_sweep(grid, tmp_path)
    assert summary["failed"] == 1 and summary["trained"] == 2
    rows = read_csv(tmp_path / "sweep.csv")
    assert [r["status"] for r in rows] == ["ok", "failed"]
    bad = tmp_path / "runs" / rows[1]["hash"] / "reports"
    assert (bad / "error.txt").exists() and not (bad / "result.json").exists()


def test_sweep_cli_exit_codes(tmp_path):
    grid = write(tmp_path / "g.json", {"base": tiny_doc(), "axes": {"seed": [0]}})
    assert main(["sweep", "--grid", str(grid), "--out", str(tmp_path / "s")]) == 0
    assert main(["sweep", "--grid", str(tmp_path / "nope.json")]) == 1
    bad = write(tmp_path / "b.json", {"base": tiny_doc(placement="last2"), "axes": {"moe.mlp_ratio": [0.01]}})
    assert main(["sweep", "--grid", str(bad), "--out", str(tmp_path / "s2")]) == 1
    diverge = write(tmp_path / "d.json", {"base": tiny_doc(), "axes": {"train.lr": [1e300]}})
    with pytest.warns(RuntimeWarning):
        assert main(["sweep", "--grid", str(diverge), "--out", str(tmp_path / "s3")]) == 3


def test_report_missing_baseline(sweep_dir, capsys):
    out, _ = sweep_dir
    assert main(["report", "--sweep", str(out)]) == 1
    assert "micro-vit" in capsys.readouterr().err


def test_report_only_baselines_give_zero_delta(tmp_path):
    run_sweep({"base": tiny_doc(), "axes": {"seed": [0, 1]}}, tmp_path)
    rep = run_report(tmp_path)
    deltas = [d["delta"] for d in rep["deltas"]]
    assert len(deltas) == 2
    # two seeds per backbone: deltas are symmetric around the mean baseline
    assert sum(deltas) == pytest.approx(0.0, abs=1e-12)
    run_sweep({"base": tiny_doc(), "axes": {"seed": [0]}}, tmp_path / "one")
    assert [d["delta"] for d in run_report(tmp_path / "one")["deltas"]] == [0.0]


def test_improvement_table_identical_accuracy():
    rows = [{"preset": "p", "placement": "none", "test_acc": 0.5, "tag": "p", "hash": "a", "seed": 0,
             "activated_params_per_token": 10},
            {"preset": "p", "placement": "last2", "test_acc": 0.5, "tag": "p-moe", "hash": "b", "seed": 0,
             "activated_params_per_token": 12}]
    table = improvement_table(rows)
    assert [(t["tag"], t["delta"]) for t in table] == [("p", 0.0), ("p-moe", 0.0)]


def test_report_front_matches_oracle(tmp_path, capsys):
    grid = {"base": tiny_doc(), "axes": {"placement": ["none", "last2"], "moe.num_experts": [2],
                                         "moe.top_k": [1, 2]}}
    run_sweep(grid, tmp_path)
    assert main(["report", "--sweep", str(tmp_path), "--pareto"]) == 0
    assert "pareto front" in capsys.readouterr().out
    rep = run_report(tmp_path)
    assert len(rep["points"]) == 3
    assert rep["front"] == pareto_bruteforce(rep["points"])
    reports = tmp_path / "reports"
    for name in ("improvement.csv", "improvement.svg", "pareto.csv", "pareto.svg"):
        assert (reports / name).exists()
    on_front = [r for r in read_csv(reports / "pareto.csv") if r["on_front"] == "1"]
    assert len(on_front) == len(rep["front"])
    run_report(tmp_path, tmp_path / "j", fmt="json")
    assert (tmp_path / "j" / "pareto.json").exists()


# -- analyze ----------------------------------------------------------
def test_analyze_run_directory(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", tiny_doc(placement="last2", moe={"num_experts": 2}))
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(run)]) == 0
    capsys.readouterr()
    assert main(["analyze", "--trace", str(run)]) == 0
    assert (run / "reports" / "similarity_L1.csv").exists()
    assert main(["analyze", "--trace", str(run / "traces" / "test_final.jsonl"), "--format", "svg",
                 "--out", str(tmp_path / "svg"), "--layer", "1"]) == 0
    assert (tmp_path / "svg" / "similarity_L1.svg").exists()
    assert main(["analyze", "--trace", str(run), "--layer", "7"]) == 1
    assert main(["analyze", "--trace", str(tmp_path / "missing.jsonl")]) == 1
