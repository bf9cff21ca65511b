"""Diagnostics tied to the analysis of the particle error.

The backward error process, the flat and discrete derivatives of the flow
functional, and a Monte Carlo check of the infinitesimal-variance formula for
the carré du champ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import Diffusion, DynamicsSpec, FiniteChain, mutate_many
from .errors import DegenerateNormalizer, IndexOutOfRange, InsufficientReplicas, OracleUnavailable
from .model import EmpiricalMeasure, as_vector, check_probability
from .oracle import NORMALIZER_FLOOR, SemigroupOracle, normalized_flow, unnormalized_semigroup

MIN_VARIANCE_REPLICAS = 100_000


def backward_error_trace(oracle: SemigroupOracle | None, occupancy, times, T: float, f) -> np.ndarray:
    """``Phi_{T-t}(eta_t^N)(f)`` along observed empirical measures.

    ``occupancy`` holds state counts (or fractions) with the time axis second to
    last, e.g. ``(K, d)`` for one run or ``(R, K, d)`` for a batch.
    """
    if oracle is None:
        raise OracleUnavailable("the backward error process needs the finite-state oracle")
    occ = np.asarray(occupancy, dtype=float)
    times = np.asarray(times, dtype=float)
    if occ.shape[-2] != times.shape[0] or occ.shape[-1] != oracle.size:
        raise ValueError("occupancy must have shape (..., len(times), n_states)")
    if np.any(times > T + 1e-12):
        raise ValueError("observation times must not exceed T")
    f = as_vector(f, oracle.size)
    ones = np.ones(oracle.size)
    out = np.empty(occ.shape[:-1])
    for k, t in enumerate(times):
        rem = max(T - t, 0.0)
        qf = unnormalized_semigroup(oracle, rem, f)
        q1 = unnormalized_semigroup(oracle, rem, ones)
        eta = occ[..., k, :]
        out[..., k] = (eta @ qf) / (eta @ q1)
    return out


def flat_derivative(oracle: SemigroupOracle, eta, remaining: float, f, fbar_reference: float = 0.0) -> np.ndarray:
    """Linear functional derivative of ``eta -> Phi_remaining(eta)(f - fbar_reference)``.

    Returns ``Q(fbar)(x) / eta Q(1) - eta Q(fbar) / (eta Q(1))**2 * Q(1)(x)``.
    """
    eta = check_probability(eta, oracle.size)
    fbar = as_vector(f, oracle.size) - fbar_reference
    qf = unnormalized_semigroup(oracle, remaining, fbar)
    q1 = unnormalized_semigroup(oracle, remaining, np.ones(oracle.size))
    z = eta @ q1
    if not z > NORMALIZER_FLOOR:
        raise DegenerateNormalizer(f"eta Q(1) = {z!r}")
    return qf / z - (eta @ qf) / z**2 * q1


def _occupancy_vector(eta: EmpiricalMeasure, size: int) -> np.ndarray:
    return np.bincount(eta.positions.astype(np.intp), minlength=size) / eta.N


def _direction(eta: EmpiricalMeasure, size: int, x_out: int, x_in: int) -> np.ndarray:
    if not 0 <= int(x_out) < eta.N:
        raise IndexOutOfRange(f"particle index {x_out} outside 0..{eta.N - 1}")
    if not 0 <= int(x_in) < size:
        raise IndexOutOfRange(f"state {x_in} outside 0..{size - 1}")
    nu = np.zeros(size)
    nu[int(x_in)] += 1.0
    nu[int(eta.positions[int(x_out)])] -= 1.0
    return nu


def discrete_derivative(
    oracle: SemigroupOracle,
    eta: EmpiricalMeasure,
    x_out: int,
    x_in: int,
    remaining: float,
    f,
    fbar_reference: float = 0.0,
) -> tuple[float, float]:
    """First and second particle derivatives in the direction ``delta_{x_in} - delta_{x^{x_out}}``.

    ``first = N (phi(eta + nu/N) - phi(eta))`` and
    ``second = 2N (first - nu(flat derivative))`` for
    ``phi = Phi_remaining(.)(f - fbar_reference)``.
    """
    if eta.N < 2:
        raise ValueError("the particle derivative needs N >= 2")
    d = oracle.size
    nu = _direction(eta, d, x_out, x_in)
    base = _occupancy_vector(eta, d)
    moved = np.clip(base + nu / eta.N, 0.0, None)
    fbar = as_vector(f, d) - fbar_reference
    if not np.any(nu):
        return 0.0, 0.0
    first = eta.N * (normalized_flow(oracle, moved, remaining, fbar) - normalized_flow(oracle, base, remaining, fbar))
    flat = nu @ flat_derivative(oracle, base, remaining, fbar)
    return float(first), float(2 * eta.N * (first - flat))


def second_derivative_bound(
    oracle: SemigroupOracle,
    eta: EmpiricalMeasure,
    x_out: int,
    x_in: int,
    remaining: float,
    f,
    fbar_reference: float = 0.0,
) -> float:
    """``2 / (eta^(i) Q(1))**2 * (|nu Q(fbar) nu Q(1)| + |Phi(eta)(fbar)| (nu Q(1))**2)``.

    ``eta^(i)`` is the sample with particle ``x_out`` removed (mass (N-1)/N).
    """
    d = oracle.size
    nu = _direction(eta, d, x_out, x_in)
    base = _occupancy_vector(eta, d)
    without = base.copy()
    without[int(eta.positions[int(x_out)])] -= 1.0 / eta.N
    fbar = as_vector(f, d) - fbar_reference
    qf = unnormalized_semigroup(oracle, remaining, fbar)
    q1 = unnormalized_semigroup(oracle, remaining, np.ones(d))
    phi = normalized_flow(oracle, base, remaining, fbar)
    a, b = nu @ qf, nu @ q1
    return float(2.0 / (without @ q1) ** 2 * (abs(a * b) + abs(phi) * b * b))


@dataclass(frozen=True)
class VarianceLimit:
    h_grid: np.ndarray
    ratios: np.ndarray  # Var(f(Y_h) | x) / h
    ratio_se: np.ndarray
    limit: float
    limit_se: float


def infinitesimal_variance_check(
    dynamics: DynamicsSpec,
    f,
    x,
    h_grid,
    rng: np.random.Generator,
    replicas: int = MIN_VARIANCE_REPLICAS,
) -> VarianceLimit:
    """Extrapolate ``Var(f(Y_h) | Y_0 = x) / h`` linearly to ``h = 0``.

    The limit equals ``2 Gamma(f)(x)``. ``f`` is a per-state vector for finite
    chains or a callable for diffusions.
    """
    h = np.asarray(h_grid, dtype=float)
    if h.ndim != 1 or len(h) < 2 or np.any(np.diff(h) >= 0):
        raise ValueError("h_grid must be strictly decreasing with at least two entries")
    if h[-1] < 1e-4:
        raise ValueError("smallest h must be at least 1e-4")
    if replicas < MIN_VARIANCE_REPLICAS:
        raise InsufficientReplicas(f"need at least {MIN_VARIANCE_REPLICAS} replicas per h, got {replicas}")
    if isinstance(dynamics, FiniteChain):
        fv = as_vector(f, dynamics.size)
        start = np.full(replicas, int(x), dtype=np.intp)

        def evaluate(y):
            return fv[y]
    elif isinstance(dynamics, Diffusion):
        start = np.tile(np.atleast_1d(np.asarray(x, dtype=float)), (replicas, 1))

        def evaluate(y):
            return np.asarray(f(y), dtype=float).reshape(replicas)
    else:
        raise TypeError(f"unsupported dynamics {type(dynamics).__name__}")

    ratios = np.empty(len(h))
    ses = np.empty(len(h))
    for i, hi in enumerate(h):
        vals = evaluate(mutate_many(dynamics, start, hi, rng))
        c = vals - vals.mean()
        var = np.mean(c**2) * replicas / (replicas - 1)
        # Delta-method standard error of the sample variance.
        se = np.sqrt(max(np.mean(c**4) - var**2, 0.0) / replicas)
        ratios[i] = var / hi
        ses[i] = se / hi
    w = 1.0 / np.maximum(ses, 1e-150) ** 2
    X = np.column_stack([np.ones_like(h), h])
    cov = np.linalg.inv(X.T @ (w[:, None] * X))
    coef = cov @ (X.T @ (w * ratios))
    return VarianceLimit(h_grid=h, ratios=ratios, ratio_se=ses, limit=float(coef[0]), limit_se=float(np.sqrt(cov[0, 0])))
