"""Command-line entry point: mesh-info, run, check, study <name>.

All randomness flows from --seed. Exit codes: 0 pass, 1 invariant or study
failure, 2 configuration error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import fem_core, io_formats, studies
from .linalg import CgFailure, spmv
from .mesh import FeFunction, build_unit_square_mesh, fe_zeros, mesh_info
from .noise import NoiseKind, derive_seed, sample_path
from .stepper import StepFailure, run_trajectory
from .studies import ExperimentConfig, build_operators, desk_config, make_noisy_image

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3


class ConfigError(Exception):
    pass


# JSON key -> (caster, ExperimentConfig field or None for extras)
_CONFIG_KEYS = {
    "n": (int, "n"),
    "t_final": (float, "t_final"),
    "tau": (float, "tau"),
    "eps": (float, "eps"),
    "delta": (float, "delta"),
    "lambda": (float, "lam"),
    "mu": (float, "mu"),
    "nu": (float, "nu"),
    "noise": (lambda v: NoiseKind(v), "noise"),
    "newton_tol": (float, "newton_tol"),
    "max_nonlinear_iters": (int, "max_nonlinear_iters"),
    "seed": (int, "seed"),
    "thinning": (int, "thinning"),
    "band_frac": (float, "band_frac"),
    "out": (str, None),
    "samples": (int, None),
    "strict": (bool, None),
    "deterministic": (bool, None),
    "eps_list": (lambda v: [float(x) for x in v], None),
    "delta_list": (lambda v: [float(x) for x in v], None),
}

_EXTRA_DEFAULTS = {
    "out": "out",
    "samples": 64,
    "strict": False,
    "deterministic": False,
    "eps_list": [2.0 ** -2, 2.0 ** -3, 2.0 ** -4, 2.0 ** -5],
    "delta_list": [2.0 ** -3, 2.0 ** -4, 2.0 ** -5, 2.0 ** -6],
}


def _load_config_file(path) -> dict:
    try:
        with open(path, "r") as src:
            doc = json.load(src)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(_CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return doc


def _resolve(args, base_cfg: ExperimentConfig):
    """Merge defaults <- config file <- CLI flags into (config, extras)."""
    doc = {}
    if getattr(args, "config", None):
        doc = _load_config_file(args.config)
    flag_values = {
        "n": args.n, "tau": args.tau, "eps": args.eps, "delta": args.delta,
        "lambda": args.lam, "mu": args.mu, "nu": args.nu,
        "noise": args.noise, "seed": args.seed, "out": args.out,
        "samples": getattr(args, "samples", None),
    }
    for key, value in flag_values.items():
        if value is not None:
            doc[key] = value
    if getattr(args, "strict", False):
        doc["strict"] = True
    if getattr(args, "deterministic", False):
        doc["deterministic"] = True

    cfg = base_cfg
    extras = dict(_EXTRA_DEFAULTS)
    try:
        for key, raw in doc.items():
            caster, target = _CONFIG_KEYS[key]
            value = caster(raw)
            if target is None:
                extras[key] = value
            else:
                cfg = cfg.updated(**{target: value})
        cfg.n_steps  # validates tau | t_final
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, extras


def _echo_config(cfg: ExperimentConfig, extras: dict, out_dir: Path) -> dict:
    doc = {
        "n": cfg.n, "t_final": cfg.t_final, "tau": cfg.tau, "eps": cfg.eps,
        "delta": cfg.delta, "lambda": cfg.lam, "mu": cfg.mu, "nu": cfg.nu,
        "noise": cfg.noise.value, "newton_tol": cfg.newton_tol,
        "max_nonlinear_iters": cfg.max_nonlinear_iters, "seed": cfg.seed,
        "thinning": cfg.thinning, "band_frac": cfg.band_frac,
        "out": extras["out"], "samples": extras["samples"],
        "strict": extras["strict"], "deterministic": extras["deterministic"],
        "eps_list": extras["eps_list"], "delta_list": extras["delta_list"],
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    io_formats.write_summary_json(doc, out_dir / "resolved_config.json")
    print("resolved config:", json.dumps(doc, sort_keys=True))
    return doc


def cmd_mesh_info(args) -> int:
    cfg, _ = _resolve(args, ExperimentConfig())
    info = mesh_info(build_unit_square_mesh(cfg.n))
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg, extras = _resolve(args, ExperimentConfig())
    out_dir = Path(extras["out"])
    _echo_config(cfg, extras, out_dir)
    ops = build_operators(cfg.n)
    _, g_noisy = make_noisy_image(ops.mesh, cfg.nu, cfg.seed)
    x0 = fe_zeros(ops.mesh)
    params = cfg.scheme_params(mu=0.0) if extras["deterministic"] else cfg.scheme_params()
    path = sample_path(
        derive_seed(cfg.seed, studies._PATH_STREAM, 0),
        params.n_steps, ops.mesh, params.noise, params.tau,
    )
    try:
        rec = run_trajectory(params, x0, g_noisy, path, ops.mesh, ops.m, ops.a)
    except StepFailure as failure:
        print(f"solver failure: {failure}", file=sys.stderr)
        return EXIT_SOLVER
    io_formats.write_energy_csv(rec, out_dir / "energy.csv")
    final = rec.states[-1]
    for name, field in (("initial", x0), ("noisy_image", g_noisy), ("final", final)):
        io_formats.write_field_csv(field, ops.mesh, out_dir / f"field_{name}.csv",
                                   time=0.0 if name != "final" else params.t_final)
        io_formats.write_field_pgm(field, ops.mesh, out_dir / f"field_{name}.pgm",
                                   lo=0.0, hi=1.0)
    print(f"run complete: {params.n_steps} steps, "
          f"final energy {rec.energies[-1].total:.6g}, files in {out_dir}")
    return EXIT_OK


def _random_zero_trace(mesh, rng) -> FeFunction:
    values = np.zeros(mesh.n_nodes)
    values[mesh.free_nodes] = rng.standard_normal(len(mesh.free_nodes))
    return FeFunction(values, zero_trace=True)


def cmd_check(args) -> int:
    cfg, extras = _resolve(args, ExperimentConfig(n=16))
    samples = extras["samples"]
    if samples == 0:
        print("warning: --samples 0, property suite is vacuous")
        return EXIT_OK
    ops = build_operators(cfg.n)
    mesh, m, a = ops.mesh, ops.m, ops.a
    eps_set = (1.0, 2.0 ** -5, 1e-3)

    total = spmv(m, np.ones(mesh.n_nodes)).sum()
    if abs(total - 1.0) > 1e-13:
        print(f"FAIL assembly: sum of mass entries {total!r} != 1")
        return EXIT_FAIL
    a_ones = spmv(a, np.ones(mesh.n_nodes))
    if np.abs(a_ones).max() > 1e-13:
        print("FAIL assembly: A @ 1 is not zero")
        return EXIT_FAIL
    print(f"PASS assembly identities (n={cfg.n})")

    for s in range(samples):
        seed = derive_seed(cfg.seed, 100, s)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        u = _random_zero_trace(mesh, rng)
        v = _random_zero_trace(mesh, rng)
        for eps in eps_set:
            q = fem_core.check_positivity(u, eps, mesh, m, a)
            if q < -1e-10 * (1.0 + abs(q)):
                print(f"FAIL positivity: q={q!r} at eps={eps}, sample seed {seed}")
                return EXIT_FAIL
            load_u = fem_core.tv_operator_load(u, eps, mesh)
            load_v = fem_core.tv_operator_load(v, eps, mesh)
            gap = float(np.dot(load_u - load_v, u.values - v.values))
            norm_u = np.sqrt(fem_core.mass_norm_sq(m, u.values))
            norm_v = np.sqrt(fem_core.mass_norm_sq(m, v.values))
            scale = 1.0 + norm_u + norm_v
            if gap < -1e-12 * scale:
                print(f"FAIL monotonicity: {gap!r} at eps={eps}, sample seed {seed}")
                return EXIT_FAIL
            ju = fem_core.energy(u, u, eps, 0.0, mesh, m).tv_eps
            jv = fem_core.energy(v, v, eps, 0.0, mesh, m).tv_eps
            sub = float(np.dot(load_u, u.values - v.values)) - (ju - jv)
            if sub < -1e-10 * scale:
                print(f"FAIL subgradient: {sub!r} at eps={eps}, sample seed {seed}")
                return EXIT_FAIL
    print(f"PASS positivity / monotonicity / subgradient ({samples} samples, "
          f"eps in {eps_set})")
    return EXIT_OK


def _study_defaults(name: str) -> ExperimentConfig:
    if name in ("cauchy-eps", "delta-rate", "stability"):
        return desk_config()
    if name == "stationary":
        return ExperimentConfig(n=16, tau=1e-4)
    return ExperimentConfig()  # energy-trace: the baseline experiment


def cmd_study(args) -> int:
    name = args.name
    cfg, extras = _resolve(args, _study_defaults(name))
    out_dir = Path(extras["out"])
    _echo_config(cfg, extras, out_dir)
    samples = extras["samples"]
    summary = {"study": name, "seed": cfg.seed}
    passed = False
    inconclusive = False

    try:
        if name == "cauchy-eps":
            report = studies.study_cauchy_eps(extras["eps_list"], samples, cfg)
            io_formats.write_mc_report_csv(report, out_dir / "cauchy_eps.csv")
            summary.update(slope=report.slope, passed=report.passed,
                           inconclusive=report.inconclusive,
                           means=[float(x) for x in report.means],
                           std_errors=[float(x) for x in report.std_errors],
                           levels=[float(x) for x in report.levels])
            passed, inconclusive = report.passed, report.inconclusive
        elif name == "delta-rate":
            report = studies.study_delta_rate(extras["delta_list"], samples, cfg)
            io_formats.write_mc_report_csv(report, out_dir / "delta_rate.csv")
            summary.update(slope=report.slope, passed=report.passed,
                           inconclusive=report.inconclusive,
                           means=[float(x) for x in report.means],
                           std_errors=[float(x) for x in report.std_errors],
                           levels=[float(x) for x in report.levels])
            passed, inconclusive = report.passed, report.inconclusive
        elif name == "stability":
            report = studies.study_stability_bounds(cfg, samples)
            rows = [
                {"name": c.name, "estimate": c.estimate, "std_error": c.std_error,
                 "bound": c.bound, "ok": c.ok}
                for c in report.checks
            ]
            summary.update(checks=rows, passed=report.passed)
            passed = report.passed
        elif name == "energy-trace":
            result = studies.study_energy_trace(cfg)
            io_formats.write_energy_csv(result.stochastic, out_dir / "energy_stochastic.csv")
            io_formats.write_energy_csv(result.deterministic, out_dir / "energy_deterministic.csv")
            summary.update(
                det_monotone=result.det_monotone,
                max_band_deviation=result.max_band_deviation,
                band_ok=result.band_ok,
                noisy_energy=result.noisy_energy,
                final_below_noisy=result.final_below_noisy,
                passed=result.passed,
            )
            passed = result.passed
        elif name == "stationary":
            result = studies.study_stationary_vs_minimizer(cfg)
            summary.update(
                j_flow=result.j_flow, j_min=result.j_min, rel_gap=result.rel_gap,
                steps_used=result.steps_used, stationary=result.stationary,
                passed=result.passed, inconclusive=result.inconclusive,
            )
            passed, inconclusive = result.passed, result.inconclusive
        else:
            print(f"unknown study {name!r}", file=sys.stderr)
            return EXIT_CONFIG
    except (StepFailure, CgFailure) as failure:
        print(f"solver failure: {failure}", file=sys.stderr)
        return EXIT_SOLVER

    io_formats.write_summary_json(summary, out_dir / "summary.json")
    print(json.dumps(summary, sort_keys=True))
    if passed:
        return EXIT_OK
    if inconclusive and not extras["strict"]:
        print("study inconclusive (pass with --strict off)")
        return EXIT_OK
    return EXIT_FAIL


def _add_common(parser) -> None:
    parser.add_argument("--config", type=str, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", type=str, default=None)
    parser.add_argument("--n", type=int, default=None)
    parser.add_argument("--tau", type=float, default=None)
    parser.add_argument("--eps", type=float, default=None)
    parser.add_argument("--delta", type=float, default=None)
    parser.add_argument("--lambda", dest="lam", type=float, default=None)
    parser.add_argument("--mu", type=float, default=None)
    parser.add_argument("--nu", type=float, default=None)
    parser.add_argument("--noise", type=str, default=None,
                        choices=[k.value for k in NoiseKind])
    parser.add_argument("--samples", type=int, default=None)
    parser.add_argument("--strict", action="store_true")
    parser.add_argument("--deterministic", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stvf",
        description="Regularized stochastic total variation flow on the unit square",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command in ("mesh-info", "run", "check"):
        p = sub.add_parser(command)
        _add_common(p)
    p_study = sub.add_parser("study")
    p_study.add_argument(
        "name",
        choices=["cauchy-eps", "delta-rate", "stability", "energy-trace", "stationary"],
    )
    _add_common(p_study)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "mesh-info": cmd_mesh_info,
        "run": cmd_run,
        "check": cmd_check,
        "study": cmd_study,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
