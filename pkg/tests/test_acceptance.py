"""Acceptance criteria, each run at its stated tolerance through the shipped configs.

Every test records one PASS/FAIL line, printed again in the terminal summary.
"""

import json
import time

import numpy as np
import pytest

from advlab.attacks import robust_loss_oracle, toy_dataset
from advlab.cli import main
from advlab.models import Activation, TwoLayerNet, init_two_layer
from advlab.ntk_rf import KernelSpec, embed_rf_into_net, kernel_fit, linearized_output, rf_from_directions
from advlab.numerics import RngStream, sample_sphere
from advlab.training import near_linearity_sweep
from conftest import CONFIGS, read_csv, record

# first reference run of configs/train_width_sweep.json, cell m=4096
REF_MIN_LOSS = 0.025413533739072614
REF_ORACLE = 0.02541353806484884
NEAR_LINEAR_CONSTANT = 10.0


def run_config(name, out, *extra):
    t0 = time.perf_counter()
    code = main(["run", "--config", str(CONFIGS / name), "--out", str(out), *extra])
    return code, json.loads((out / "summary.json").read_text()), time.perf_counter() - t0


def test_criterion_01_gradient_oracles(tmp_path):
    c2, s2, t2 = run_config("gradcheck_two_layer.json", tmp_path / "two")
    cd, sd, td = run_config("gradcheck_deep.json", tmp_path / "deep")
    ok = (
        c2 == 0 and cd == 0
        and s2["cases"] == sd["cases"] == 50
        and s2["max_rel_error"] <= 1e-7 and sd["max_rel_error"] <= 1e-5
        and t2 < 60 and td < 60
    )
    record(1, ok, f"two_layer={s2['max_rel_error']:.2e} deep={sd['max_rel_error']:.2e} time={t2 + td:.0f}s")
    assert ok


def test_criterion_02_projection_feasibility(tmp_path):
    code, s, elapsed = run_config("train_deep_projected.json", tmp_path / "deep")
    cfg = json.loads((CONFIGS / "train_deep_projected.json").read_text())["params"]
    m, R = cfg["m"], cfg["R"]
    log = read_csv(tmp_path / "deep" / "train_log.csv")
    exc = np.max(np.column_stack([log[k] for k in log if k.startswith("excursion_")]), axis=1)
    ok = (
        code == 0 and len(exc) == cfg["T"] == 2000 and cfg["H"] == 2 and cfg["dataset"]["n"] == 16
        and np.max(exc) <= R / np.sqrt(m) + 1e-10 and elapsed < 600
    )
    record(2, ok, f"max_excursion={np.max(exc):.12g} bound={R / np.sqrt(m):.12g} time={elapsed:.0f}s")
    assert ok


def test_criterion_03_convergence(reference_sweep):
    s = reference_sweep.summary(4096)
    min_loss, oracle = s["min_surrogate_loss"], s["robust_loss_oracle_at_argmin"]
    ok = (
        s["exit_code"] == 0 and s["steps"] == 3000
        and min_loss < 0.1 and oracle < 0.3
        and min_loss == pytest.approx(REF_MIN_LOSS, rel=0.05)
        and oracle == pytest.approx(REF_ORACLE, rel=0.05)
    )
    record(3, ok, f"min_L_A={min_loss:.6g} oracle_at_argmin={oracle:.6g} (pinned {REF_MIN_LOSS:.6g}, {REF_ORACLE:.6g})")
    assert ok


def test_criterion_04_width_scaling(reference_sweep):
    assert reference_sweep.code == 0
    widths = [256, 1024, 4096]
    vals = [reference_sweep.summary(m)["min_surrogate_loss"] for m in widths]
    ok = all(b <= 1.1 * a for a, b in zip(vals, vals[1:]))
    record(4, ok, "min_L_A " + " ".join(f"m={m}:{v:.6g}" for m, v in zip(widths, vals)))
    assert ok


def test_criterion_05_near_linearity():
    t0 = time.perf_counter()
    widths = [256, 1024, 4096]
    res = near_linearity_sweep(widths, d=10, H=2, trials=100, seed=0)
    elapsed = time.perf_counter() - t0
    scaled = [res["two_layer_scaled_max"][m] for m in widths]
    deep = [res["deep_median"][m] for m in widths]
    ok = max(scaled) <= NEAR_LINEAR_CONSTANT and all(b < a for a, b in zip(deep, deep[1:])) and elapsed < 600
    record(5, ok, f"two_layer_scaled={[f'{v:.2e}' for v in scaled]} deep_median={[f'{v:.2e}' for v in deep]}")
    assert ok


def test_criterion_06_ntk(tmp_path):
    code, s, elapsed = run_config("ntk_relu.json", tmp_path / "ntk")
    rows = read_csv(tmp_path / "ntk" / "ntk.csv")
    angles = rows["angle"]
    anchors = np.abs(rows["mc_mean"][angles == 0] - 0.5) <= 3 * rows["mc_se"][angles == 0]
    opposite = np.abs(rows["mc_mean"][np.isclose(angles, np.pi)]) <= 3 * rows["mc_se"][np.isclose(angles, np.pi)]
    ok = (
        code == 0 and len(angles) == 5 and anchors.size == 1 and opposite.size == 1
        and bool(anchors.all() and opposite.all()) and np.max(np.abs(rows["z"])) <= 3 and elapsed < 300
    )
    record(6, ok, f"max|z|={np.max(np.abs(rows['z'])):.3f} over {len(angles)} angles time={elapsed:.0f}s")
    assert ok


def test_criterion_07_random_feature_law(tmp_path):
    code, s, elapsed = run_config("rf_slope.json", tmp_path / "rf")
    rows = read_csv(tmp_path / "rf" / "rf.csv")
    Ms = sorted(set(rows["M"].tolist()))
    ok = (
        code == 0 and Ms == [64, 256, 1024, 4096]
        and -0.65 <= s["slope"] <= -0.35
        and np.max(rows["max_coeff_over_bound"]) <= 1.0 and elapsed < 900
    )
    record(7, ok, f"slope={s['slope']:.4f} max|c_i|*M/bound={np.max(rows['max_coeff_over_bound']):.3f}")
    assert ok


def test_criterion_08_embedding():
    t0 = time.perf_counter()
    m, d = 8192, 5
    spec = KernelSpec(Activation("quad_relu"), "sphere_sqrt_d")
    ds = toy_dataset(RngStream(21), 6, d, 0.05)
    fit = kernel_fit(spec, ds, 20, targets=3.0 * ds.y, lam=1e-3, rng=RngStream(3))
    p0 = init_two_layer(RngStream(5), m, d, "sphere_sqrt_d")
    model = rf_from_directions(fit, p0.w)
    emb = embed_rf_into_net(model, p0)
    probes = sample_sphere(RngStream(2), d, n=100)
    lin_err = float(np.max(np.abs(linearized_output(p0, emb.params, spec.activation, probes) - model.predict(probes))))
    oracle = robust_loss_oracle(TwoLayerNet(emb.params, spec.activation), ds, budget=4, rng=RngStream(6))
    elapsed = time.perf_counter() - t0
    ok = lin_err <= 1e-10 and oracle <= 0.3 and elapsed < 1200
    record(8, ok, f"linearization_error={lin_err:.2e} robust_oracle={oracle:.4f} time={elapsed:.0f}s")
    assert ok


def test_criterion_09_robust_shattering(tmp_path):
    rates, counts, total = [], [], 0.0
    for d in (2, 3):
        code, s, elapsed = run_config(f"capacity_ball_n4_d{d}.json", tmp_path / f"d{d}")
        rates.append(s["pass_rate"] if code == 0 else 0.0)
        counts.append(s["labelings"])
        total += elapsed
    ok = rates == [1.0, 1.0] and counts == [2 ** (2 * 2), 2 ** (2 * 3)] and total < 300
    record(9, ok, f"pass_rate d=2:{rates[0]} ({counts[0]}) d=3:{rates[1]} ({counts[1]}) time={total:.0f}s")
    assert ok


def test_criterion_10_determinism(tmp_path, reference_sweep):
    out = tmp_path / "w1"
    code = main(["sweep", "--config", str(CONFIGS / "train_width_sweep.json"), "--out", str(out), "--workers", "1"])
    names = ["sweep.csv"] + [f"{c}/train_log.csv" for c in reference_sweep.cells()["cell"]]
    same = [(out / n).read_bytes() == (reference_sweep.out / n).read_bytes() for n in names]
    reruns = []
    for name in ("gradcheck_deep.json", "ntk_relu.json", "capacity_ball_n4_d2.json"):
        a, b = tmp_path / f"a-{name}", tmp_path / f"b-{name}"
        main(["run", "--config", str(CONFIGS / name), "--out", str(a)])
        main(["run", "--config", str(CONFIGS / name), "--out", str(b)])
        for f in sorted(a.glob("*.csv")):
            reruns.append(f.read_bytes() == (b / f.name).read_bytes())
    ok = code == reference_sweep.code == 0 and all(same) and len(same) == 4 and all(reruns) and reruns
    record(10, ok, f"sweep workers 1 vs 2: {sum(same)}/{len(same)} identical, reruns {sum(reruns)}/{len(reruns)} identical")
    assert ok
