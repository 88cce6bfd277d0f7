"""CSV and PGM writers. Pure functions of their inputs, byte-stable.

Floats are written with 17 significant digits, which round-trips IEEE
doubles exactly; reading a written file and writing it again reproduces the
bytes.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

import numpy as np

from .mesh import FeFunction, Mesh


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


@dataclass
class FieldSnapshot:
    """A nodal field on the structured (n+1) x (n+1) grid, row-major."""

    n: int
    time: float
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != ((self.n + 1) ** 2,):
            raise ValueError("value count must be (n+1)^2")


def write_field_csv(f: FeFunction, mesh: Mesh, path, time: float = 0.0) -> None:
    """Header `# n=<n> time=<t>`, then one `x,y,value` line per node."""
    if len(f.values) != (mesh.n + 1) ** 2:
        raise ValueError("field does not match a structured mesh")
    with open(path, "w", newline="\n") as out:
        out.write(f"# n={mesh.n} time={_fmt(time)}\n")
        for (x, y), v in zip(mesh.nodes, f.values):
            out.write(f"{_fmt(x)},{_fmt(y)},{_fmt(v)}\n")


_FIELD_HEADER = re.compile(r"# n=(\d+) time=(\S+)$")


def read_field_csv(path) -> FieldSnapshot:
    with open(path, "r") as src:
        header = src.readline().rstrip("\n")
        match = _FIELD_HEADER.match(header)
        if not match:
            raise ValueError(f"bad field header: {header!r}")
        n = int(match.group(1))
        time = float(match.group(2))
        values = np.empty((n + 1) ** 2)
        for k in range((n + 1) ** 2):
            parts = src.readline().split(",")
            values[k] = float(parts[2])
    return FieldSnapshot(n=n, time=time, values=values)


def write_field_pgm(f: FeFunction, mesh: Mesh, path, lo: float, hi: float) -> None:
    """Plain PGM rendering; pixel = round(255 clamp((v-lo)/(hi-lo))), y=1 on top."""
    if not lo < hi:
        raise ValueError("need lo < hi")
    n = mesh.n
    grid = f.values.reshape(n + 1, n + 1)  # row iy, column ix
    scaled = np.clip((grid - lo) / (hi - lo), 0.0, 1.0)
    pixels = np.floor(255.0 * scaled + 0.5).astype(np.int64)
    with open(path, "w", newline="\n") as out:
        out.write(f"P2\n{n + 1} {n + 1}\n255\n")
        for iy in range(n, -1, -1):
            out.write(" ".join(str(p) for p in pixels[iy]) + "\n")


_ENERGY_COLUMNS = "step,time,tv_eps,tv,fidelity,total,increment_sq,nonlinear_iters"


def write_energy_csv(rec, path) -> None:
    """Per-step energy trace of a trajectory, N+1 rows."""
    with open(path, "w", newline="\n") as out:
        out.write(_ENERGY_COLUMNS + "\n")
        for i, e in enumerate(rec.energies):
            out.write(
                f"{i},{_fmt(rec.times[i])},{_fmt(e.tv_eps)},{_fmt(e.tv)},"
                f"{_fmt(e.fidelity)},{_fmt(e.total)},"
                f"{_fmt(rec.step_increments[i])},{int(rec.nonlinear_iters[i])}\n"
            )


def read_energy_csv(path) -> dict:
    with open(path, "r") as src:
        header = src.readline().rstrip("\n")
        if header != _ENERGY_COLUMNS:
            raise ValueError(f"bad energy header: {header!r}")
        rows = [line.rstrip("\n").split(",") for line in src if line.strip()]
    columns = {}
    names = _ENERGY_COLUMNS.split(",")
    for j, name in enumerate(names):
        cast = int if name in ("step", "nonlinear_iters") else float
        columns[name] = np.array([cast(row[j]) for row in rows])
    return columns


def write_mc_report_csv(report, path) -> None:
    """Level-by-level means and standard errors of a Monte Carlo statistic."""
    with open(path, "w", newline="\n") as out:
        out.write("statistic,level,mean,std_error,n_samples\n")
        for level, mean, se in zip(report.levels, report.means, report.std_errors):
            out.write(
                f"{report.statistic},{_fmt(level)},{_fmt(mean)},{_fmt(se)},"
                f"{report.n_samples}\n"
            )


def write_summary_json(summary: dict, path) -> None:
    with open(path, "w", newline="\n") as out:
        json.dump(summary, out, indent=2, sort_keys=True)
        out.write("\n")
