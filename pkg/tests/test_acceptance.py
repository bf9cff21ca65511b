"""Acceptance gate on the 2-state reference scenario.

Each test runs one criterion at its stated tolerance and records a single
PASS/FAIL line, listed at the end of the pytest run. Criterion 7 is soft: a
failure is reported as a warning.
"""

import warnings
from dataclasses import replace
from functools import lru_cache

import numpy as np
import pytest
from scipy import stats

from conftest import (
    TWO_STATE_ETA0,
    TWO_STATE_F,
    TWO_STATE_L,
    TWO_STATE_V,
    random_generator,
    record_criterion,
    two_state_config,
)
from fkparticles.diagnostics import (
    backward_error_trace,
    discrete_derivative,
    flat_derivative,
    infinitesimal_variance_check,
    second_derivative_bound,
)
from fkparticles.dynamics import Diffusion, DriftSpec, FiniteChain, eigen_potential_from_h, lyapunov_residual
from fkparticles.errors import NonpositiveError
from fkparticles.estimators import concentration_tail, fit_rate, moment_errors, run_replicas, stability_ratio
from fkparticles.kernels import KernelVariant, kernel_matrix, mean_field_identity_residual
from fkparticles.model import EmpiricalMeasure, GeneratorMatrix, Potential, TestFunction
from fkparticles.oracle import (
    build_oracle,
    carre_du_champ,
    carre_du_champ_algebraic,
    normalized_flow,
    principal_eigen,
    unnormalized_semigroup,
)

SEED = 20240601
F = TestFunction.indicator(1, 2)
ORC = build_oracle(TWO_STATE_L, TWO_STATE_V)
RATE_GRID = (64, 128, 256, 512)


@lru_cache(maxsize=None)
def _batch(N, R, seed, horizon=5.0, obs_times=(5.0,), kernel="fleming_viot"):
    return run_replicas(two_state_config(N, kernel=kernel, horizon=horizon, obs_times=obs_times), R, seed, F)


def _verdict(number, ok, detail):
    record_criterion(number, "PASS" if ok else "FAIL", detail)
    assert ok, detail


def test_criterion_01_oracle_exactness():
    semigroup = 0.0
    for t in (0.1, 0.7, 1.3):
        for s in (0.1, 0.7, 1.3):
            for g in (TWO_STATE_F, np.ones(2), np.array([2.0, -1.0])):
                lhs = unnormalized_semigroup(ORC, t + s, g)
                rhs = unnormalized_semigroup(ORC, t, unnormalized_semigroup(ORC, s, g))
                semigroup = max(semigroup, np.abs(lhs - rhs).max())
    eig = principal_eigen(ORC)
    M = TWO_STATE_L - np.diag(TWO_STATE_V)
    right = np.abs(M @ eig.h + eig.lam * eig.h).max()
    left = np.abs(eig.qsd @ M + eig.lam * eig.qsd).max()
    lam_err = abs(eig.lam - (3 - np.sqrt(5)) / 2)
    qsd_err = np.abs(eig.qsd - [(np.sqrt(5) - 1) / 2, (3 - np.sqrt(5)) / 2]).max()
    ok = semigroup <= 1e-9 and max(right, left) <= 1e-9 and lam_err <= 1e-9 and qsd_err <= 1e-9
    _verdict(
        1,
        ok,
        f"semigroup {semigroup:.1e}, eigen residual {max(right, left):.1e}, "
        f"lambda {eig.lam:.10f} (err {lam_err:.1e}), qsd ({eig.qsd[0]:.4f}, {eig.qsd[1]:.4f}) (err {qsd_err:.1e})",
    )


def test_criterion_02_kernel_identity():
    rng = np.random.default_rng(SEED + 2)
    worst = {}
    for variant in KernelVariant:
        w = 0.0
        for _ in range(1000):
            N = int(rng.integers(1, 65))
            d = int(rng.integers(2, 8))
            low = 0.0 if variant is KernelVariant.FLEMING_VIOT else -3.0
            V = Potential.table(rng.uniform(low, 3.0, d))
            eta = EmpiricalMeasure(rng.integers(0, d, N))
            w = max(w, mean_field_identity_residual(variant, V, eta, rng.normal(size=d)))
        worst[variant.value] = w
    flat = all(
        np.all(kernel_matrix(KernelVariant.CENTERED, np.full(N, c)) == 0.0) for N in (1, 5, 64) for c in (-2.0, 0.0, 0.7)
    )
    ok = max(worst.values()) <= 1e-12 and flat
    _verdict(2, ok, f"worst residual {worst}, centered kernel zero for constant V: {flat}")


def test_criterion_03_l2_rate():
    points = [(N, moment_errors(_batch(N, 4000, SEED + 3), 2).lp[0]) for N in RATE_GRID]
    fit = fit_rate(points)
    ok = -0.6 <= fit.slope <= -0.4 and fit.r_squared >= 0.95
    errs = ", ".join(f"N={n}: {e:.4f}" for n, e in points)
    _verdict(3, ok, f"L2 slope {fit.slope:.3f} (band [-0.6, -0.4]), r^2 {fit.r_squared:.4f}; {errs}")


def test_criterion_04_bias_rate():
    points = []
    for N in RATE_GRID:
        m = moment_errors(_batch(N, 20000 * 512 // N, SEED + 4), 1)
        points.append((N, abs(m.bias[0]), m.bias_se[0]))
    detail = ", ".join(f"N={n}: {b:.2e}+-{se:.1e}" for n, b, se in points)
    try:
        fit = fit_rate([(n, b) for n, b, _ in points])
    except NonpositiveError as exc:
        _verdict(4, False, f"fit impossible ({exc}); {detail}")
    ok = -1.3 <= fit.slope <= -0.7
    _verdict(4, ok, f"bias slope {fit.slope:.3f} (band [-1.3, -0.7]); {detail}")


def test_criterion_05_time_uniformity():
    b = _batch(256, 4000, SEED + 5, horizon=10.0, obs_times=(2.0, 10.0))
    l2 = moment_errors(b, 2).lp
    ratio = l2[1] / l2[0]
    _verdict(5, ratio <= 1.5, f"L2(t=10)/L2(t=2) = {l2[1]:.5f}/{l2[0]:.5f} = {ratio:.3f} (limit 1.5)")


def _tail_check(normalize):
    tails = []
    for N in (128, 256, 512):
        b = _batch(N, 20000, SEED + 6)
        if normalize != 1.0:
            b = replace(b, values=b.values / normalize, oracle=b.oracle / normalize)
        tails.append(concentration_tail(b, [0.1]))
    emp = [t.empirical_tail[0] for t in tails]
    cs = [t.c_fit for t in tails]
    c_hat = min(cs)
    decreasing = all(a > b for a, b in zip(emp, emp[1:]))
    ratio = stability_ratio(tails)
    covered = all(t.envelope_holds(c_hat) for t in tails)
    ok = decreasing and min(cs) > 0 and ratio < 3 and covered
    detail = (
        f"tails {[f'{e:.2e}' for e in emp]}, c_fit {[f'{c:.2f}' for c in cs]}, "
        f"ratio {ratio:.2f} (limit 3), decreasing {decreasing}, envelope at c_min {covered}"
    )
    return ok, detail


def test_criterion_06_concentration_envelope():
    # Normalized f: the indicator has sup norm 1 and oscillation 1, so f/3 meets the unit budget.
    ok, detail = _tail_check(3.0)
    _verdict(6, ok, "f/3: " + detail)


def test_concentration_envelope_raw_indicator():
    """Same batches with the unscaled indicator, where the tails at u=0.1 are observable."""
    ok, detail = _tail_check(1.0)
    print("raw indicator: " + detail)
    assert ok, detail


def test_criterion_07_kernel_variance_ordering():
    fv = _batch(256, 4000, SEED + 7, kernel="fleming_viot").values[:, 0]
    ce = _batch(256, 4000, SEED + 7, kernel="centered").values[:, 0]
    d = (ce - ce.mean()) ** 2 - (fv - fv.mean()) ** 2
    p = stats.ttest_1samp(d, 0.0, alternative="greater").pvalue
    ok = p >= 0.01
    detail = f"var centered {ce.var(ddof=1):.3e}, var FV {fv.var(ddof=1):.3e}, one-sided p = {p:.3f} (reject at 0.01)"
    if ok:
        record_criterion(7, "PASS", detail)
    else:
        record_criterion(7, "SOFT-FAIL", detail)
        warnings.warn(f"kernel variance ordering not observed: {detail}")


def test_criterion_08_backward_drift():
    T = 5.0
    times = (1.0, 2.0, 3.0, 4.0, 5.0)
    target = normalized_flow(ORC, TWO_STATE_ETA0, T, TWO_STATE_F)
    drift, se = {}, {}
    for N in (64, 256):
        b = _batch(N, 800 * N, SEED + 8, horizon=T, obs_times=times)
        trace = backward_error_trace(ORC, b.occupancy, b.times, T, TWO_STATE_F)
        drift[N] = trace.mean(axis=0) - target
        se[N] = trace.std(axis=0, ddof=1) / np.sqrt(b.R)
    ratio = drift[64][-1] / drift[256][-1]
    scaling = 2.0 <= ratio <= 8.0
    # Below the horizon the drift must stay under the t/N line through its end value.
    envelope = all(
        np.all(np.abs(drift[N][:-1]) <= 2 * np.array(times[:-1]) / T * abs(drift[N][-1]) + 3 * se[N][:-1]) for N in drift
    )
    ok = scaling and envelope
    _verdict(
        8,
        ok,
        f"N*drift(T): N=64 {64 * drift[64][-1]:.4f}, N=256 {256 * drift[256][-1]:.4f}; "
        f"ratio {ratio:.2f} (1/N gives 4, band [2, 8]); below t/N envelope {envelope}",
    )


def test_criterion_09_derivative_diagnostics():
    T = 5.0
    eps = 1e-6
    flat = flat_derivative(ORC, TWO_STATE_ETA0, T, TWO_STATE_F)
    fd = np.empty(2)
    for x in range(2):
        e = np.eye(2)[x]
        fd[x] = (
            normalized_flow(ORC, TWO_STATE_ETA0 + eps * (e - TWO_STATE_ETA0), T, TWO_STATE_F)
            - normalized_flow(ORC, TWO_STATE_ETA0, T, TWO_STATE_F)
        ) / eps
    flat_err = np.abs(flat - fd).max()

    rng = np.random.default_rng(SEED + 9)
    excess = -np.inf
    for _ in range(100):
        N = int(rng.integers(2, 201))
        eta = EmpiricalMeasure(rng.integers(0, 2, N))
        x_out, x_in = int(rng.integers(0, N)), int(rng.integers(0, 2))
        rem = float(rng.uniform(0, T))
        _, second = discrete_derivative(ORC, eta, x_out, x_in, rem, TWO_STATE_F)
        bound = second_derivative_bound(ORC, eta, x_out, x_in, rem, TWO_STATE_F)
        slack = 16 * N**2 * np.finfo(float).eps
        excess = max(excess, abs(second) - bound - slack)

    identity = 0.0
    for _ in range(20):
        G = random_generator(rng, int(rng.integers(2, 6)))
        f = rng.normal(size=len(G))
        a, b = carre_du_champ(G, f), carre_du_champ_algebraic(G, f)
        identity = max(identity, np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))

    gamma = carre_du_champ(TWO_STATE_L, TWO_STATE_F)
    chain = FiniteChain(GeneratorMatrix(TWO_STATE_L))
    var = infinitesimal_variance_check(chain, TWO_STATE_F, 0, (0.1, 0.05, 0.025), rng, replicas=400_000)
    var_err = abs(var.limit - 2 * gamma[0]) / (2 * gamma[0])

    ok = flat_err <= 1e-4 and excess <= 0 and identity <= 0.05 and var_err <= 0.05
    _verdict(
        9,
        ok,
        f"flat vs FD {flat_err:.1e}, second-derivative excess {excess:.1e}, "
        f"identity rel err {identity:.1e}, variance limit {var.limit:.4f} vs {2 * gamma[0]:.4f} ({var_err:.1%})",
    )


def test_criterion_10_lyapunov_example():
    grid = np.concatenate([-np.linspace(5, 50, 451), np.linspace(5, 50, 451)])
    xsq = DriftSpec.polynomial((0.0, 0.0, 1.0))
    res = lyapunov_residual(Diffusion(xsq, dim=1), 1.0, eigen_potential_from_h("exp_tanh", xsq), 0.0, grid)
    ou = DriftSpec.ornstein_uhlenbeck(1.0)
    res_ou = lyapunov_residual(Diffusion(ou, dim=1), 1.0, eigen_potential_from_h("exp_tanh", ou), 0.0, grid)
    holds = bool(np.all(res <= 0))
    ou_positive = bool(np.all(res_ou > 0))
    neg_side = bool(np.all(res[grid < 0] <= 0))
    _verdict(
        10,
        holds and ou_positive,
        f"b=x^2: max residual {res.max():.3g} (x<0 side holds: {neg_side}, x>0 max {res[grid > 0].max():.3g}); "
        f"OU residual positive everywhere: {ou_positive} (min {res_ou.min():.3g})",
    )
