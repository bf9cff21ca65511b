"""Command line entry point: ``fkparticles {run,oracle,diag} <scenario.json>``."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .config import load_config
from .diagnostics import (
    discrete_derivative,
    flat_derivative,
    infinitesimal_variance_check,
    second_derivative_bound,
)
from .dynamics import lyapunov_residual
from .errors import ConfigSyntaxError, ConfigValidationError, FKError
from .experiment import run_experiment
from .model import EmpiricalMeasure, as_vector
from .oracle import (
    assumption_diagnostics,
    build_oracle,
    carre_du_champ,
    carre_du_champ_algebraic,
    normalized_flow,
    principal_eigen,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
VARIANCE_RTOL = 0.05
CHAIN_H_GRID = (0.1, 0.05, 0.025)
DIFFUSION_H_GRID = (0.02, 0.01, 0.005)


def _finite_parts(cfg):
    if not cfg.is_finite:
        raise FKError("this command needs a finite-state scenario")
    L = np.asarray(cfg.dynamics["rates"], dtype=float)
    oracle = build_oracle(L, cfg.build_potential())
    f = as_vector(cfg.build_test_function())
    law = cfg.initial_law
    if "categorical" in law:
        eta0 = np.asarray(law["categorical"], dtype=float)
    else:
        eta0 = np.zeros(L.shape[0])
        eta0[law["point"]] = 1.0
    return L, oracle, f, eta0


def cmd_oracle(cfg, args) -> tuple[dict, bool]:
    L, oracle, f, eta0 = _finite_parts(cfg)
    eig = principal_eigen(oracle)
    diag = assumption_diagnostics(oracle, eig, f, cfg.horizon, cfg.horizon / 100)
    report = {
        "lambda": eig.lam,
        "h": eig.h.tolist(),
        "qsd": eig.qsd.tolist(),
        "qsd_f": float(eig.qsd @ f),
        "flow": {repr(t): normalized_flow(oracle, eta0, t, f) for t in cfg.obs_times},
        "c_minus": diag.c_minus,
        "C_plus": diag.C_plus,
        "w1_decay_rate": diag.fitted_decay_rate,
        "w2_decay_rate": diag.w2_decay_rate,
    }
    ok = diag.c_minus > 0 and diag.fitted_decay_rate < 0
    return report, ok


def _diag_finite(cfg, args) -> tuple[dict, bool]:
    L, oracle, f, eta0 = _finite_parts(cfg)
    rng = np.random.default_rng(args.seed if args.seed is not None else cfg.base_seed)
    d = L.shape[0]
    T = cfg.horizon

    # Flat derivative against a directional finite difference.
    eps = 1e-6
    flat = flat_derivative(oracle, eta0, T, f)
    fd = np.empty(d)
    for x in range(d):
        e = np.zeros(d)
        e[x] = 1.0
        fd[x] = (normalized_flow(oracle, eta0 + eps * (e - eta0), T, f) - normalized_flow(oracle, eta0, T, f)) / eps
    flat_err = float(np.abs(flat - fd).max())

    # Second particle derivative against its envelope on random samples.
    worst = -np.inf
    for _ in range(100):
        N = int(rng.integers(2, 201))
        eta = EmpiricalMeasure(rng.integers(0, d, size=N))
        x_out, x_in = int(rng.integers(0, N)), int(rng.integers(0, d))
        rem = float(rng.uniform(0, T))
        _, second = discrete_derivative(oracle, eta, x_out, x_in, rem, f)
        bound = second_derivative_bound(oracle, eta, x_out, x_in, rem, f)
        # Rounding in the two nested difference quotients grows like N^2 eps |f|.
        slack = 16 * N**2 * np.finfo(float).eps * np.abs(f).max()
        worst = max(worst, abs(second) - bound - slack)

    gamma = carre_du_champ(L, f)
    identity_err = float(np.abs(gamma - carre_du_champ_algebraic(L, f)).max())

    x0 = int(np.argmax(gamma))
    var = infinitesimal_variance_check(cfg.build_dynamics(), f, x0, CHAIN_H_GRID, rng, replicas=400_000)
    target = 2 * gamma[x0]
    var_ok = abs(var.limit - target) <= VARIANCE_RTOL * (abs(target) if target else 1.0)
    report = {
        "flat_derivative_max_error": flat_err,
        "second_derivative_worst_excess": float(worst),
        "carre_du_champ_identity_error": identity_err,
        "variance_limit": var.limit,
        "variance_limit_target": float(target),
        "variance_state": x0,
    }
    ok = flat_err <= 1e-4 and worst <= 0 and identity_err <= 1e-12 and var_ok
    return report, ok


def _diag_diffusion(cfg, args) -> tuple[dict, bool]:
    dyn = cfg.build_dynamics()
    V = cfg.build_potential()
    f = cfg.build_test_function()
    rng = np.random.default_rng(args.seed if args.seed is not None else cfg.base_seed)
    report: dict = {}
    ok = True
    if dyn.dim == 1:
        grid = np.concatenate([-np.linspace(5, 50, 451), np.linspace(5, 50, 451)])
        res = lyapunov_residual(dyn, args.m, V, args.lam, grid)
        report["lyapunov_max_residual"] = float(res.max())
        report["lyapunov_holds"] = bool(np.all(res <= 0))
        ok &= report["lyapunov_holds"]
    law = cfg.initial_law
    x0 = np.asarray(law["point"] if "point" in law else law["gaussian"]["mean"], dtype=float)
    # Gamma(f) = |grad f|^2 for L = Laplacian + b . grad.
    h = 1e-5
    grad = np.array([(f(x0 + h * e) - f(x0 - h * e)) / (2 * h) for e in np.eye(dyn.dim)]).ravel()
    target = 2 * float(grad @ grad)
    # Diffusion ratios bend faster in h than chain ratios, so the grid sits closer to 0.
    var = infinitesimal_variance_check(dyn, f, x0, DIFFUSION_H_GRID, rng, replicas=400_000)
    report.update(variance_limit=var.limit, variance_limit_target=target)
    ok &= abs(var.limit - target) <= VARIANCE_RTOL * max(abs(target), 1e-12)
    return report, bool(ok)


def cmd_diag(cfg, args) -> tuple[dict, bool]:
    return _diag_finite(cfg, args) if cfg.is_finite else _diag_diffusion(cfg, args)


def cmd_run(cfg, args) -> tuple[dict, bool]:
    res = run_experiment(cfg, replicas=args.replicas, seed=args.seed, out=args.out, workers=args.workers)
    report = dict(res.summary, csv=str(res.csv_path), summary_file=str(res.summary_path))
    for N, msg in res.summary["errors"].items():
        print(f"N={N} failed: {msg}", file=sys.stderr)
    return report, res.all_passed


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fkparticles", description="Feynman-Kac particle experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("run", "simulate the scenario over its N grid and write results"),
        ("oracle", "exact finite-state quantities of the scenario"),
        ("diag", "derivative, carre du champ and Lyapunov checks"),
    ):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("config", help="scenario JSON file")
        sp.add_argument("--replicas", type=int, help="override the replica count")
        sp.add_argument("--seed", type=int, help="override the base seed")
        sp.add_argument("--out", help="override the output directory")
        sp.add_argument("--workers", type=int, default=1, help="worker processes for replicas")
        if name == "diag":
            sp.add_argument("--m", type=float, default=1.0, help="Lyapunov function parameter")
            sp.add_argument("--lam", type=float, default=0.0, help="eigenvalue used in the Lyapunov check")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except (ConfigSyntaxError, ConfigValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    handler = {"run": cmd_run, "oracle": cmd_oracle, "diag": cmd_diag}[args.command]
    try:
        report, ok = handler(cfg, args)
    except FKError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps(report, indent=2, sort_keys=True, default=float))
    return EXIT_OK if ok else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
