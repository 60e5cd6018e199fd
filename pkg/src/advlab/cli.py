"""Batch experiment runner.

    advlab run   --config cfg.json [--out DIR] [--seed N]
    advlab sweep --config cfg.json [--out DIR] [--seed N] [--workers N]

Output directory precedence: ``--out``, then ``$ADVLAB_OUT``, then the config's
``out`` key, then ``runs/<kind>-<config hash prefix>``.

Exit codes: 0 success, 1 failed check (gradcheck above threshold), 2 invalid
config, 3 numerical divergence, 4 at least one failed sweep cell.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackSpec, Dataset, plain_loss, robust_loss_oracle, surrogate_loss, toy_dataset
from .capacity import (
    BallClassifier,
    ConstantClassifier,
    NetInterpolatorConfig,
    ShatterResult,
    all_labelings,
    build_grid,
    net_shatter_check,
    separating_balls,
    shatter_details,
)
from .config import ConfigError, ExperimentConfig, canonical, parse_config, set_path
from .gradcheck import gradcheck
from .io import load_params, save_params, sha256_file
from .models import Activation, TwoLayerNet, as_model, init_deep, init_two_layer
from .ntk_rf import (
    KernelSpec,
    kernel_fit,
    ntk_closed_form,
    ntk_mc,
    rf_construct,
    rf_sup_error,
    save_gram_csv,
    single_anchor_fit,
    ntk_gram,
)
from .numerics import RngStream
from .training import DeepArch, TrainConfig, TrainingDiverged, TwoLayerArch, lemma_diagnostics, train_projected

EXIT_OK, EXIT_CHECK, EXIT_INVALID, EXIT_DIVERGED, EXIT_SWEEP = 0, 1, 2, 3, 4
OUT_ENV = "ADVLAB_OUT"


@dataclass
class Result:
    summary: dict
    tables: dict = field(default_factory=dict)  # file name -> (header, rows)
    files: list = field(default_factory=list)  # extra artifacts written by the runner
    code: int = EXIT_OK
    headline: tuple = ("", float("nan"))


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    path.write_text(buf.getvalue())


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# runners


def _dataset(cfg) -> Dataset:
    if cfg.path is not None:
        return Dataset.from_jsonl(cfg.path)
    return toy_dataset(RngStream(cfg.seed), cfg.n, cfg.d, cfg.delta, cfg.margin)


def _attack(cfg, rng: RngStream) -> AttackSpec:
    return AttackSpec(cfg.kind, cfg.steps, cfg.step_size, cfg.restarts, rng)


def _train_table(run):
    H = run.excursion.shape[1]
    header = ["t", "L_A", "L_plain"] + [f"excursion_{h + 1}" for h in range(H)] + ["proj_active"]
    rows = [
        [t, run.loss_surrogate[t], run.loss_plain[t], *run.excursion[t], bool(run.proj_active[t])]
        for t in range(run.steps)
    ]
    return header, rows


def run_train(p, seed: int, out: Path) -> Result:
    ds = _dataset(p.dataset)
    if p.arch == "deep":
        arch = DeepArch(p.m, ds.d, p.H)
    else:
        arch = TwoLayerArch(p.m, ds.d, p.activation, p.init)
    root = RngStream(seed)
    # default: projected GD for the deep net, plain GD for the two-layer net
    project = (p.arch == "deep") if p.project is None else p.project
    cfg = TrainConfig(p.alpha, p.T, p.R, arch, _attack(p.attack, root.fork(1)), seed, project)
    try:
        run = train_projected(cfg, ds)
    except TrainingDiverged as exc:
        run = exc.run
        return Result(
            {"status": "diverged", "reason": run.reason, **run.summary()},
            {"train_log.csv": _train_table(run)},
            code=EXIT_DIVERGED,
            headline=("min_surrogate_loss", run.min_loss),
        )
    act = None if p.arch == "deep" else Activation(p.activation)
    oracle = robust_loss_oracle(as_model(run.best_params, act), ds, budget=p.oracle_budget, rng=root.fork(2))
    summary = {"status": "ok", **run.summary(), "robust_loss_oracle_at_argmin": oracle, "projected": project}
    if p.arch == "two_layer":
        summary["within_3R_all"] = bool(np.all(run.excursion[:, 0] <= 3 * p.R))
    files = []
    if p.save_params:
        files += [q.name for q in save_params(out / "params_best", run.best_params)]
    return Result(summary, {"train_log.csv": _train_table(run)}, files, headline=("min_surrogate_loss", run.min_loss))


def run_attack_eval(p, seed: int, out: Path) -> Result:
    ds = _dataset(p.dataset)
    root = RngStream(seed)
    arch = p.arch
    if p.checkpoint is not None:
        params, meta = load_params(p.checkpoint)
        arch = meta["kind"]
    elif arch == "deep":
        params = init_deep(root.fork(0), p.m, ds.d, p.H)
    else:
        params = init_two_layer(root.fork(0), p.m, ds.d)
    act = None if arch == "deep" else Activation(p.activation)
    model = as_model(params, act)
    rows = [["clean", 0, 1, plain_loss(model, ds)]]
    for i, a in enumerate(p.attacks):
        rows.append([a.kind, a.steps, a.restarts, surrogate_loss(_attack(a, root.fork(1, i)), model, ds)])
    oracle = robust_loss_oracle(model, ds, budget=p.oracle_budget, rng=root.fork(2))
    rows.append(["oracle", 50, p.oracle_budget, oracle])
    summary = {"status": "ok", "losses": {f"{r[0]}_{i}": r[3] for i, r in enumerate(rows)}, "robust_loss_oracle": oracle}
    return Result(summary, {"attacks.csv": (["attack", "steps", "restarts", "loss"], rows)}, headline=("robust_loss_oracle", oracle))


def run_gradcheck(p, seed: int, out: Path) -> Result:
    errs = gradcheck(p.arch, p.m, p.d, p.cases, seed, p.H, p.activation, p.step, p.displace)
    worst = float(errs.max())
    ok = worst <= p.threshold
    summary = {
        "status": "ok" if ok else "failed",
        "max_rel_error": worst,
        "threshold": p.threshold,
        "cases": p.cases,
        "reason": "" if ok else f"max relative error {worst!r} exceeds {p.threshold!r}",
    }
    rows = [[i, e] for i, e in enumerate(errs)]
    return Result(
        summary, {"gradcheck.csv": (["case", "rel_error"], rows)}, code=EXIT_OK if ok else EXIT_CHECK,
        headline=("max_rel_error", worst),
    )


def run_diagnose(p, seed: int, out: Path) -> Result:
    root = RngStream(seed)
    rows, reports = [], {}
    for m in p.widths:
        rep = lemma_diagnostics(init_deep(root.fork(m), m, p.d, p.H), p.trials, root.fork(m, 1))
        reports[str(m)] = rep
        rows.append([
            m, rep["a_norm_ratio"], rep["hidden_membership_rate"], rep["grad_ratio_min"], rep["grad_ratio_max"],
            float(np.mean(rep["grad_ratio_mean"])), *rep["pass"].values(),
        ])
    header = ["m", "a_norm_ratio", "hidden_membership_rate", "grad_ratio_min", "grad_ratio_max", "grad_ratio_mean",
              "pass_a_norm", "pass_hidden_norm", "pass_grad_scale"]
    all_pass = all(all(r["pass"].values()) for r in reports.values())
    summary = {"status": "ok", "all_pass": all_pass, "widths": reports}
    return Result(summary, {"diagnose.csv": (header, rows)}, headline=("all_pass", float(all_pass)))


def run_ntk(p, seed: int, out: Path) -> Result:
    spec = KernelSpec(Activation(p.activation), p.init_law, p.mc_samples, seed)
    root = RngStream(seed)
    e1 = np.zeros(p.d)
    e1[0] = 1.0
    e2 = np.zeros(p.d)
    e2[1 % p.d] = 1.0
    rows, worst = [], 0.0
    for i, theta in enumerate(p.angles):
        y = math.cos(theta) * e1 + math.sin(theta) * e2 if p.d > 1 else math.copysign(1.0, math.cos(theta)) * e1
        mean, se = ntk_mc(spec, root.fork(i), e1, y)
        exact = float(ntk_closed_form(spec.activation, e1[None], y[None])[0, 0]) if spec.has_closed_form else float("nan")
        z = (mean - exact) / se if se > 0 else (0.0 if mean == exact else float("inf"))
        if spec.has_closed_form:
            worst = max(worst, abs(z))
        rows.append([theta, mean, se, exact, z])
    summary = {"status": "ok", "max_abs_z": worst if spec.has_closed_form else None, "closed_form": spec.has_closed_form}
    return Result(summary, {"ntk.csv": (["angle", "mc_mean", "mc_se", "closed_form", "z"], rows)}, headline=("max_abs_z", worst))


def run_rf(p, seed: int, out: Path) -> Result:
    spec = KernelSpec(Activation(p.activation), p.init_law, seed=seed)
    root = RngStream(seed)
    files = []
    if p.target == "single_anchor":
        x0 = np.zeros(p.d)
        x0[0] = 1.0
        fit = single_anchor_fit(spec, x0)
    else:
        ds = _dataset(p.dataset)
        fit = kernel_fit(spec, ds, p.cap_samples, lam=p.lam, rng=root.fork(3))
    if p.export_gram:
        save_gram_csv(out / "gram.csv", ntk_gram(spec, fit.anchors))
        files.append("gram.csv")
    rows, means = [], []
    coeff_ok = True
    for M in p.Ms:
        errs = []
        for r in range(p.reps):
            model = rf_construct(fit, root.fork(4, M, r), M)
            err = rf_sup_error(model, fit, p.probes, seed=seed)
            bound = fit.rf_norm_bound(model.directions) / M
            ratio = float(np.max(np.linalg.norm(model.coeffs, axis=1)) / bound)
            coeff_ok &= ratio <= 1.0 + 1e-12
            errs.append(err)
            rows.append([M, r, err, ratio])
        means.append(float(np.mean(errs)))
    slope = float(np.polyfit(np.log(p.Ms), np.log(means), 1)[0]) if len(p.Ms) > 1 else float("nan")
    summary = {
        "status": "ok",
        "slope": slope,
        "mean_sup_error": dict(zip(map(str, p.Ms), means)),
        "coefficient_bound_holds": coeff_ok,
        "anchor_residual": fit.anchor_residual(),
    }
    return Result(summary, {"rf.csv": (["M", "rep", "sup_error", "max_coeff_over_bound"], rows)}, files, headline=("slope", slope))


def _labels_str(lab) -> str:
    return "".join("+" if v > 0 else "-" for v in lab)


def run_capacity(p, seed: int, out: Path) -> Result:
    grid = build_grid(p.n, p.d, p.delta, p.eps_ratio * p.delta)
    labs = list(all_labelings(grid.size))
    ids = range(len(labs)) if p.labelings is None else p.labelings
    for i in ids:
        if not 0 <= i < len(labs):
            raise ConfigError(f"params.labelings: id {i} out of range [0, {len(labs)})")
    net_cfg = NetInterpolatorConfig(m=p.m, T=p.T, alpha=p.alpha, lift_scale=p.lift_scale, seed=seed)
    rows = []
    for i in ids:
        lab = labs[i]
        sep = separating_balls(grid, lab)
        if not sep.ok:
            res = ShatterResult(False, -np.inf, len(sep.violations))
        elif p.interpolator == "ball":
            res = shatter_details(grid, BallClassifier.from_separation(sep), lab, p.probes_per_ball)
        elif p.interpolator == "constant":
            res = shatter_details(grid, ConstantClassifier(), lab, p.probes_per_ball)
        else:
            res = net_shatter_check(grid, lab, net_cfg, p.probes_per_ball)
        rows.append([i, _labels_str(lab), res.passed, res.min_margin, res.failures])
    rate = sum(r[2] for r in rows) / len(rows)
    summary = {"status": "ok", "labelings": len(rows), "passed": sum(r[2] for r in rows), "pass_rate": rate}
    header = ["labeling", "labels", "passed", "min_margin", "failures"]
    return Result(summary, {"capacity.csv": (header, rows)}, headline=("pass_rate", rate))


RUNNERS = {
    "train": run_train,
    "attack-eval": run_attack_eval,
    "gradcheck": run_gradcheck,
    "diagnose": run_diagnose,
    "ntk": run_ntk,
    "rf": run_rf,
    "capacity": run_capacity,
}


# --------------------------------------------------------------------------
# run / sweep


def execute(cfg: ExperimentConfig, out: Path) -> Result:
    """Run one validated config into ``out`` and write summary, CSVs and manifest."""
    out.mkdir(parents=True, exist_ok=True)
    try:
        res = RUNNERS[cfg.kind](cfg.params, cfg.seed, out)
    except ConfigError as exc:
        return write_error(out, str(exc))
    except (ValueError, np.linalg.LinAlgError) as exc:
        res = Result({"status": "error", "reason": f"{type(exc).__name__}: {exc}"}, code=EXIT_CHECK)
    names = list(res.files)
    for name, (header, rows) in res.tables.items():
        write_csv(out / name, header, rows)
        names.append(name)
    summary = {"kind": cfg.kind, "seed": cfg.seed, "exit_code": res.code, "headline": list(res.headline), **res.summary}
    summary.setdefault("reason", "")
    write_json(out / "summary.json", summary)
    names.append("summary.json")
    manifest = {
        "version": __version__,
        "kind": cfg.kind,
        "seed": cfg.seed,
        "config_sha256": cfg.digest(),
        "config": cfg.raw,
        "artifacts": {n: sha256_file(out / n) for n in sorted(names)},
    }
    write_json(out / "manifest.json", manifest)
    return res


def write_error(out: Path, reason: str) -> Result:
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "summary.json", {"status": "invalid", "exit_code": EXIT_INVALID, "reason": reason})
    return Result({"status": "invalid", "reason": reason}, code=EXIT_INVALID)


def resolve_out(flag: str | None, raw: dict | None, kind: str, digest: str) -> Path:
    if flag:
        return Path(flag)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    if isinstance(raw, dict) and isinstance(raw.get("out"), str):
        return Path(raw["out"])
    return Path("runs") / f"{kind}-{digest[:12]}"


def load_raw(path: str):
    try:
        with open(path) as fh:
            return json.load(fh), None
    except (OSError, json.JSONDecodeError) as exc:
        return None, f"cannot read config: {exc}"


def cmd_run(args) -> int:
    raw, err = load_raw(args.config)
    out_fallback = resolve_out(args.out, raw, "invalid", "config")
    if err:
        return write_error(out_fallback, err).code
    try:
        cfg = parse_config(raw, args.seed)
    except ConfigError as exc:
        return write_error(out_fallback, str(exc)).code
    out = resolve_out(args.out, raw, cfg.kind, cfg.digest())
    t0 = time.perf_counter()
    res = execute(cfg, out)
    print(f"{cfg.kind}: exit {res.code} {res.headline[0]}={res.headline[1]!r} ({time.perf_counter() - t0:.1f}s) -> {out}",
          file=sys.stderr)
    return res.code


def _cell(job):
    raw_cell, seed, out = job
    cfg = parse_config(raw_cell, seed)
    res = execute(cfg, Path(out))
    return res.code, res.headline[0], res.headline[1]


def expand_grid(raw: dict, seed_override):
    grid = raw.get("grid")
    if not isinstance(grid, dict) or not grid:
        raise ConfigError("sweep needs a non-empty 'grid' object")
    axes = sorted(grid)
    for k in axes:
        if not isinstance(grid[k], list) or not grid[k]:
            raise ConfigError(f"grid axis {k!r} must be a non-empty list")
    base = {k: v for k, v in raw.items() if k not in ("grid", "out")}
    cells = []
    for values in itertools.product(*(grid[k] for k in axes)):
        params = base.get("params", {})
        for k, v in zip(axes, values):
            params = set_path(params, k, v)
        cell_raw = dict(base, params=params)
        cells.append((dict(zip(axes, values)), parse_config(cell_raw, seed_override).raw))
    return axes, cells


def cmd_sweep(args) -> int:
    raw, err = load_raw(args.config)
    out_fallback = resolve_out(args.out, raw, "sweep-invalid", "config")
    if err:
        return write_error(out_fallback, err).code
    try:
        top = parse_config(raw, args.seed, allow_grid=True)
        axes, cells = expand_grid(raw, args.seed)
    except ConfigError as exc:
        return write_error(out_fallback, str(exc)).code
    out = resolve_out(args.out, raw, f"sweep-{top.kind}", top.digest())
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cell_raw, top.seed, str(out / f"cell-{i:03d}")) for i, (_, cell_raw) in enumerate(cells)]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_cell, jobs))
    else:
        results = [_cell(j) for j in jobs]
    rows = []
    for i, ((key, _), (code, hname, hval)) in enumerate(zip(cells, results)):
        rows.append([f"cell-{i:03d}", *[canonical(key[a]) for a in axes], "ok" if code == 0 else "failed", code, hname, hval])
    write_csv(out / "sweep.csv", ["cell", *axes, "status", "exit_code", "headline", "value"], rows)
    failed = sum(r[len(axes) + 1] != "ok" for r in rows)
    code = EXIT_SWEEP if failed else EXIT_OK
    write_json(out / "summary.json", {"kind": top.kind, "seed": top.seed, "cells": len(rows), "failed": failed, "exit_code": code})
    artifacts = {"sweep.csv": sha256_file(out / "sweep.csv"), "summary.json": sha256_file(out / "summary.json")}
    for i in range(len(rows)):
        artifacts[f"cell-{i:03d}/manifest.json"] = sha256_file(out / f"cell-{i:03d}" / "manifest.json")
    write_json(out / "manifest.json", {
        "version": __version__, "kind": top.kind, "seed": top.seed, "config_sha256": top.digest(),
        "config": top.raw, "artifacts": artifacts,
    })
    print(f"sweep {top.kind}: {len(rows)} cells, {failed} failed -> {out}", file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="advlab", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    commands = (
        ("run", cmd_run, "run one experiment config"),
        ("sweep", cmd_sweep, "run every cell of a config's grid"),
    )
    for name, fn, text in commands:
        sp = sub.add_parser(name, help=text, description=text)
        sp.add_argument("--config", required=True, metavar="PATH", help="JSON experiment config")
        sp.add_argument("--out", metavar="DIR", help=f"output directory (overrides ${OUT_ENV} and the config)")
        sp.add_argument("--seed", type=int, metavar="N", help="override the config seed")
        sp.add_argument("--workers", type=int, default=1, metavar="N", help="parallel sweep cells (default 1)")
        sp.set_defaults(fn=fn)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.workers < 1:
        print("--workers must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
