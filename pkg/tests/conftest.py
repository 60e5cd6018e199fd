import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from advlab.cli import main
from advlab.numerics import RngStream


@pytest.fixture
def rng():
    return RngStream(20240601)


def central_diff(fn, x, step):
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp = fn(x)
        x[i] = old - step
        fm = fn(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


REPO = Path(__file__).resolve().parents[1]
CONFIGS = REPO / "configs"


def read_csv(path) -> dict[str, np.ndarray]:
    """CSV log as columns of floats (non-numeric columns are kept as strings)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for key in rows[0]:
        vals = [r[key] for r in rows]
        try:
            out[key] = np.array([float(v) for v in vals])
        except ValueError:
            out[key] = np.array(vals)
    return out


@dataclass
class SweepOutput:
    out: Path
    code: int

    def cells(self) -> dict[str, np.ndarray]:
        return read_csv(self.out / "sweep.csv")

    def cell_dir(self, m: int) -> Path:
        agg = self.cells()
        idx = int(np.flatnonzero(agg["m"] == m)[0])
        return self.out / str(agg["cell"][idx])

    def summary(self, m: int) -> dict:
        return json.loads((self.cell_dir(m) / "summary.json").read_text())

    def train_log(self, m: int) -> dict[str, np.ndarray]:
        return read_csv(self.cell_dir(m) / "train_log.csv")


@pytest.fixture(scope="session")
def reference_sweep(tmp_path_factory) -> SweepOutput:
    """The pinned two-layer pgd-training width sweep, run once per session through the CLI."""
    out = tmp_path_factory.mktemp("reference") / "width_sweep"
    code = main(["sweep", "--config", str(CONFIGS / "train_width_sweep.json"), "--out", str(out), "--workers", "2"])
    return SweepOutput(out, code)


@pytest.fixture(scope="session")
def ref_ds():
    from advlab.attacks import toy_dataset

    return toy_dataset(RngStream(11), 16, 10, 0.05)


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
