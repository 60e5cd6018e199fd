import json
import os
import subprocess
import sys

import pytest

from advlab.cli import OUT_ENV, main
from advlab.config import ConfigError, TrainPayload, build, parse_config
from conftest import CONFIGS, read_csv


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


DIVERGENT = {"alpha": 1e12, "project": False, "T": 20, "attack": {"kind": "identity"},
             "dataset": {"n": 40, "d": 3, "delta": 0.01, "seed": 7}}


def tiny_train(**params):
    base = {"arch": "two_layer", "m": 32, "T": 5, "alpha": 1.0, "attack": {"kind": "pgd", "steps": 2},
            "dataset": {"n": 6, "d": 4}}
    base.update(params)
    return {"schema_version": 1, "kind": "train", "seed": 0, "params": base}


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


# ---------------------------------------------------------------- validation


def test_strict_config_parsing():
    cfg = parse_config({"schema_version": 1, "kind": "gradcheck", "params": {"cases": 3}})
    assert cfg.params.cases == 3 and cfg.seed == 0
    bad = [
        {"schema_version": 2, "kind": "gradcheck"},
        {"schema_version": 1, "kind": "plot"},
        {"schema_version": 1, "kind": "gradcheck", "extra": 1},
        {"schema_version": 1, "kind": "gradcheck", "params": {"casez": 3}},
        {"schema_version": 1, "kind": "gradcheck", "params": {"cases": 2.5}},
        {"schema_version": 1, "kind": "gradcheck", "params": {"cases": True}},
        {"schema_version": 1, "kind": "gradcheck", "params": {"arch": "cnn"}},
        {"schema_version": 1, "kind": "gradcheck", "seed": -1},
        {"schema_version": 1, "kind": "train", "params": {"attack": {"kind": "pgd", "bogus": 1}}},
        {"schema_version": 1, "kind": "train", "params": {"R": 0}},
        {"schema_version": 1, "kind": "train", "grid": {"m": [1]}},
    ]
    for raw in bad:
        with pytest.raises(ConfigError):
            parse_config(raw)


def test_nested_defaults():
    p = build(TrainPayload, {"attack": {"steps": 3}})
    assert p.attack.kind == "pgd" and p.attack.steps == 3 and p.dataset.n == 16


def test_seed_override_changes_hash():
    raw = {"schema_version": 1, "kind": "gradcheck", "seed": 1}
    assert parse_config(raw).digest() != parse_config(raw, seed_override=2).digest()
    assert parse_config(raw, seed_override=2).seed == 2


# ---------------------------------------------------------------- run


def test_gradcheck_run(tmp_path):
    out = tmp_path / "g"
    code = main(["run", "--config", str(CONFIGS / "gradcheck_two_layer.json"), "--out", str(out)])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["max_rel_error"] <= summary["threshold"] == 1e-7
    assert len(read_csv(out / "gradcheck.csv")["rel_error"]) == 50
    man = manifest(out)
    assert set(man["artifacts"]) == {"gradcheck.csv", "summary.json"}
    assert man["seed"] == 0 and len(man["config_sha256"]) == 64


def test_gradcheck_failure_exit_code(tmp_path):
    cfg = {"schema_version": 1, "kind": "gradcheck", "params": {"cases": 2, "threshold": 1e-30}}
    assert main(["run", "--config", write(tmp_path / "c.json", cfg), "--out", str(tmp_path / "o")]) == 1


def test_repeat_run_identical_bytes(tmp_path):
    cfg = write(tmp_path / "c.json", tiny_train())
    main(["run", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["run", "--config", cfg, "--out", str(tmp_path / "b")])
    assert (tmp_path / "a/train_log.csv").read_bytes() == (tmp_path / "b/train_log.csv").read_bytes()
    assert manifest(tmp_path / "a")["artifacts"] == manifest(tmp_path / "b")["artifacts"]


def test_negative_alpha_exit_2_only_error_summary(tmp_path):
    out = tmp_path / "o"
    code = main(["run", "--config", write(tmp_path / "c.json", tiny_train(alpha=-1.0)), "--out", str(out)])
    assert code == 2
    assert [p.name for p in out.iterdir()] == ["summary.json"]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["exit_code"] == 2 and "alpha" in summary["reason"]


def test_unreadable_config_exit_2(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    assert main(["run", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o2")]) == 2


def test_divergence_exit_3(tmp_path):
    out = tmp_path / "o"
    cfg = tiny_train(**DIVERGENT)
    assert main(["run", "--config", write(tmp_path / "c.json", cfg), "--out", str(out)]) == 3
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "diverged" and summary["reason"].startswith("diverged: step=")
    assert (out / "train_log.csv").exists()


def test_seed_flag_overrides(tmp_path):
    cfg = write(tmp_path / "c.json", tiny_train())
    main(["run", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "5"])
    assert manifest(tmp_path / "a")["seed"] == 5
    main(["run", "--config", cfg, "--out", str(tmp_path / "b")])
    assert (tmp_path / "a/train_log.csv").read_bytes() != (tmp_path / "b/train_log.csv").read_bytes()


def test_env_output_override_and_no_stray_writes(tmp_path, monkeypatch):
    work = tmp_path / "work"
    work.mkdir()
    monkeypatch.chdir(work)
    cfg = write(tmp_path / "c.json", {"schema_version": 1, "kind": "gradcheck", "params": {"cases": 2}})
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "envout"))
    assert main(["run", "--config", cfg]) == 0
    assert (tmp_path / "envout" / "manifest.json").exists()
    assert list(work.iterdir()) == []
    # --out beats the environment
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "manifest.json").exists()


def test_default_output_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv(OUT_ENV, raising=False)
    cfg = write(tmp_path / "c.json", {"schema_version": 1, "kind": "gradcheck", "params": {"cases": 2}})
    assert main(["run", "--config", cfg]) == 0
    (run,) = (tmp_path / "runs").iterdir()
    assert run.name.startswith("gradcheck-")


@pytest.mark.parametrize(
    "name,table",
    [
        ("ntk", "ntk.csv"),
        ("rf", "rf.csv"),
        ("capacity", "capacity.csv"),
        ("diagnose", "diagnose.csv"),
        ("attack-eval", "attacks.csv"),
    ],
)
def test_every_kind_runs(tmp_path, name, table):
    params = {
        "ntk": {"mc_samples": 1000},
        "rf": {"Ms": [8, 16], "reps": 2, "probes": 8, "export_gram": True},
        "capacity": {"labelings": [0, 5], "probes_per_ball": 10},
        "diagnose": {"widths": [32], "trials": 5},
        "attack-eval": {"m": 16, "dataset": {"n": 4, "d": 3}},
    }[name]
    out = tmp_path / "o"
    cfg = write(tmp_path / "c.json", {"schema_version": 1, "kind": name, "params": params})
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    assert table in manifest(out)["artifacts"]
    if name == "rf":
        assert "gram.csv" in manifest(out)["artifacts"]


def test_capacity_bad_labeling_id(tmp_path):
    cfg = {"schema_version": 1, "kind": "capacity", "params": {"labelings": [99]}}
    assert main(["run", "--config", write(tmp_path / "c.json", cfg), "--out", str(tmp_path / "o")]) == 2


def test_checkpoint_roundtrip_through_attack_eval(tmp_path):
    cfg = write(tmp_path / "c.json", tiny_train(save_params=True))
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "t")]) == 0
    assert "params_best.bin" in manifest(tmp_path / "t")["artifacts"]
    ev = {"schema_version": 1, "kind": "attack-eval",
          "params": {"checkpoint": str(tmp_path / "t" / "params_best"), "dataset": {"n": 6, "d": 4}}}
    assert main(["run", "--config", write(tmp_path / "e.json", ev), "--out", str(tmp_path / "e")]) == 0
    rows = read_csv(tmp_path / "e" / "attacks.csv")
    assert rows["loss"][-1] >= rows["loss"][0]


# ---------------------------------------------------------------- sweep


def test_width_sweep_three_cells(tmp_path):
    raw = dict(tiny_train(), grid={"m": [256, 1024, 4096]})
    out = tmp_path / "s"
    assert main(["sweep", "--config", write(tmp_path / "c.json", raw), "--out", str(out)]) == 0
    agg = read_csv(out / "sweep.csv")
    assert list(agg["m"]) == [256, 1024, 4096]
    assert all(agg["status"] == "ok")
    for i in range(3):
        assert (out / f"cell-{i:03d}" / "manifest.json").exists()


@pytest.mark.parametrize("grid", [{}, {"m": []}, None, {"m": 5}])
def test_empty_grid_exit_2(tmp_path, grid):
    raw = tiny_train()
    if grid is not None:
        raw["grid"] = grid
    assert main(["sweep", "--config", write(tmp_path / "c.json", raw), "--out", str(tmp_path / "o")]) == 2


def test_invalid_cell_exit_2(tmp_path):
    raw = dict(tiny_train(), grid={"alpha": [1.0, -1.0]})
    assert main(["sweep", "--config", write(tmp_path / "c.json", raw), "--out", str(tmp_path / "o")]) == 2


def test_divergent_cell_exit_4(tmp_path):
    raw = dict(tiny_train(**DIVERGENT), grid={"alpha": [1e-3, 1e12, 1e-4]})
    out = tmp_path / "s"
    assert main(["sweep", "--config", write(tmp_path / "c.json", raw), "--out", str(out)]) == 4
    agg = read_csv(out / "sweep.csv")
    assert list(agg["status"]) == ["ok", "failed", "ok"]
    assert list(agg["exit_code"]) == [0, 3, 0]
    assert json.loads((out / "summary.json").read_text())["failed"] == 1


def test_sweep_identical_across_workers(tmp_path):
    raw = dict(tiny_train(), grid={"m": [16, 32], "attack.restarts": [1, 2]})
    cfg = write(tmp_path / "c.json", raw)
    main(["sweep", "--config", cfg, "--out", str(tmp_path / "w1"), "--workers", "1"])
    main(["sweep", "--config", cfg, "--out", str(tmp_path / "w3"), "--workers", "3"])
    assert (tmp_path / "w1/sweep.csv").read_bytes() == (tmp_path / "w3/sweep.csv").read_bytes()
    for i in range(4):
        a = (tmp_path / f"w1/cell-{i:03d}/train_log.csv").read_bytes()
        assert a == (tmp_path / f"w3/cell-{i:03d}/train_log.csv").read_bytes()
    assert manifest(tmp_path / "w1")["artifacts"] == manifest(tmp_path / "w3")["artifacts"]


def test_module_entry_point(tmp_path):
    cfg = write(tmp_path / "c.json", {"schema_version": 1, "kind": "gradcheck", "params": {"cases": 1}})
    res = subprocess.run(
        [sys.executable, "-m", "advlab", "run", "--config", cfg, "--out", str(tmp_path / "o")],
        capture_output=True, text=True, env={**os.environ},
    )
    assert res.returncode == 0, res.stderr
    assert "gradcheck: exit 0" in res.stderr
