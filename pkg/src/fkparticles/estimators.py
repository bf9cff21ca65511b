"""Replica orchestration and the error statistics built on top of it."""

from __future__ import annotations

import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats
from statsmodels.stats.proportion import proportion_confint

from .dynamics import FiniteChain
from .engine import EngineConfig, run, run_counts_batch
from .errors import FKError, InsufficientReplicas, NonpositiveError
from .model import TestFunction, as_vector
from .oracle import build_oracle, normalized_flow
from .rng import Streams, derive_key, replica_keys

MIN_REPLICAS = 30
JACKKNIFE_BLOCKS = 20
ENVELOPE_PREFACTOR = 2.0 * np.exp(0.5)


class ReplicaFailed(FKError, RuntimeError):
    def __init__(self, replica: int, cause: Exception):
        super().__init__(f"replica {replica} failed: {type(cause).__name__}: {cause}")
        self.replica = replica
        self.cause = cause


@dataclass(frozen=True)
class ReplicaBatch:
    """Observations ``values[r, k] = eta^N_{t_k}(f)`` of R independent runs."""

    values: np.ndarray
    times: np.ndarray
    oracle: np.ndarray | None
    N: int
    keys: np.ndarray
    event_counts: np.ndarray
    occupancy: np.ndarray | None = None  # (R, K, d) counts, finite chains only
    fingerprint: str = ""

    @property
    def R(self) -> int:
        return int(self.values.shape[0])


def _is_compilable(config: EngineConfig) -> bool:
    return isinstance(config.dynamics, FiniteChain) and config.potential.is_tabulated


def _run_reference(config: EngineConfig, keys: np.ndarray, f, d: int | None):
    K = len(config.obs_times)
    values = np.empty((len(keys), K))
    events = np.empty(len(keys), dtype=np.int64)
    occ = np.zeros((len(keys), K, d), dtype=np.int64) if d is not None else None
    for r, key in enumerate(keys):
        k = 0

        def record(t, eta, r=r):
            nonlocal k
            values[r, k] = eta.integrate(f)
            if occ is not None:
                occ[r, k] = np.bincount(eta.positions.astype(np.intp), minlength=d)
            k += 1

        try:
            state = run(config, Streams.from_key(int(key)), on_observe=record)
        except FKError as exc:
            raise ReplicaFailed(r, exc) from exc
        events[r] = state.event_count
    return values, events, occ


def _run_chunk(config, keys, f, engine, d):
    if engine == "compiled":
        counts, events = run_counts_batch(config, keys)
        fv = as_vector(f, d)
        return counts @ fv / config.N, events, counts
    return _run_reference(config, keys, f, d)


_FORK_JOB: tuple | None = None


def _fork_worker(bounds):
    config, keys, f, engine, d = _FORK_JOB
    lo, hi = bounds
    return _run_chunk(config, keys[lo:hi], f, engine, d)


def run_replicas(
    config: EngineConfig,
    R: int,
    base_seed: int,
    f,
    tag: int = 0,
    engine: str = "auto",
    workers: int = 1,
    fingerprint: str = "",
    with_oracle: bool = True,
) -> ReplicaBatch:
    """R independent runs observed through ``f`` at ``config.obs_times``.

    Replica r runs under the key split ``r`` from ``derive_key(base_seed, tag, N)``.
    ``engine`` is ``"compiled"`` (finite chains), ``"reference"`` (per-particle)
    or ``"auto"``. Worker chunks are concatenated in replica order, so the
    batch does not depend on ``workers``.
    """
    global _FORK_JOB
    if R < 1:
        raise ValueError("R must be at least 1")
    if engine == "auto":
        engine = "compiled" if _is_compilable(config) else "reference"
    if engine == "compiled" and not _is_compilable(config):
        raise ValueError("the compiled engine needs a finite chain with a tabulated potential")
    finite = isinstance(config.dynamics, FiniteChain)
    d = config.dynamics.size if finite else None
    if finite and isinstance(f, TestFunction) and f.is_tabulated:
        f = f.values
    keys = replica_keys(derive_key(base_seed, tag, config.N), R)

    workers = max(1, min(int(workers), R))
    if workers == 1:
        parts = [_run_chunk(config, keys, f, engine, d)]
    else:
        edges = np.linspace(0, R, workers + 1).astype(int)
        _FORK_JOB = (config, keys, f, engine, d)
        try:
            with ProcessPoolExecutor(workers, mp_context=mp.get_context("fork")) as pool:
                parts = list(pool.map(_fork_worker, zip(edges[:-1], edges[1:])))
        finally:
            _FORK_JOB = None
    values = np.concatenate([p[0] for p in parts])
    events = np.concatenate([p[1] for p in parts])
    occ = np.concatenate([p[2] for p in parts]) if finite else None

    oracle = None
    if with_oracle and finite and config.potential.is_tabulated and config.initial_law.kind in ("categorical", "point"):
        orc = build_oracle(config.dynamics.generator, config.potential)
        eta0 = _initial_vector(config)
        fv = as_vector(f, d)
        oracle = np.array([normalized_flow(orc, eta0, t, fv) for t in config.obs_times])
    return ReplicaBatch(
        values=values,
        times=np.asarray(config.obs_times, dtype=float),
        oracle=oracle,
        N=int(config.N),
        keys=keys,
        event_counts=events,
        occupancy=occ,
        fingerprint=fingerprint,
    )


def _initial_vector(config: EngineConfig) -> np.ndarray:
    law = config.initial_law
    if law.kind == "categorical":
        return np.asarray(law.weights, dtype=float)
    eta0 = np.zeros(config.dynamics.size)
    eta0[int(law.point[0])] = 1.0
    return eta0


@dataclass(frozen=True)
class MomentErrors:
    """Per observation time: bias, centered L^p error and their standard errors."""

    times: np.ndarray
    p: int
    bias: np.ndarray
    bias_se: np.ndarray
    lp: np.ndarray
    lp_se: np.ndarray
    R: int


def _jackknife(x: np.ndarray, stat, blocks: int) -> tuple[np.ndarray, np.ndarray]:
    """Statistic over axis 0 and its delete-one-block jackknife standard error."""
    full = stat(x)
    groups = np.array_split(np.arange(x.shape[0]), blocks)
    loo = np.stack([stat(np.delete(x, g, axis=0)) for g in groups])
    se = np.sqrt((blocks - 1) / blocks * np.sum((loo - loo.mean(axis=0)) ** 2, axis=0))
    return full, se


def moment_errors(batch: ReplicaBatch, p: int = 2, reference=None, blocks: int = JACKKNIFE_BLOCKS) -> MomentErrors:
    """Bias and L^p error of the replicas against the oracle (or ``reference``)."""
    if int(p) < 1:
        raise ValueError("p must be a positive integer")
    if batch.R < MIN_REPLICAS:
        raise InsufficientReplicas(f"need at least {MIN_REPLICAS} replicas, got {batch.R}")
    ref = batch.oracle if reference is None else np.broadcast_to(np.asarray(reference, dtype=float), batch.values.shape[1:])
    if ref is None:
        raise ValueError("no oracle values attached and no reference given")
    err = batch.values - ref
    bias, bias_se = _jackknife(err, lambda e: e.mean(axis=0), blocks)
    lp, lp_se = _jackknife(err, lambda e: np.mean(np.abs(e) ** p, axis=0) ** (1.0 / p), blocks)
    return MomentErrors(times=batch.times, p=int(p), bias=bias, bias_se=bias_se, lp=lp, lp_se=lp_se, R=batch.R)


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    n_grid: tuple[int, ...]
    slope_stderr: float = float("nan")


def fit_rate(points) -> RateFit:
    """Least squares of log(error) on log(N) over ``[(N, error), ...]``."""
    pts = sorted((int(n), float(e)) for n, e in points)
    ns = [n for n, _ in pts]
    if len(pts) < 3:
        raise ValueError("need at least three grid points")
    if len(set(ns)) != len(ns):
        raise ValueError("grid values of N must be distinct")
    errs = np.array([e for _, e in pts])
    if np.any(~(errs > 0)):
        raise NonpositiveError("errors must be strictly positive for a log-log fit")
    res = stats.linregress(np.log(ns), np.log(errs))
    return RateFit(
        slope=float(res.slope),
        intercept=float(res.intercept),
        r_squared=float(res.rvalue**2),
        n_grid=tuple(ns),
        slope_stderr=float(res.stderr),
    )


def envelope(u, N: int, c: float):
    u = np.asarray(u, dtype=float)
    return ENVELOPE_PREFACTOR * np.exp(-N * c * u**2 / (1 + u))


@dataclass(frozen=True)
class TailEstimate:
    """Exceedance frequencies of ``|error| >= u`` with Wilson bounds and the fitted envelope constant."""

    u_grid: np.ndarray
    counts: np.ndarray
    empirical_tail: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    N: int
    R: int
    c_fit: float

    def envelope_holds(self, c: float) -> bool:
        return bool(np.all(self.upper <= envelope(self.u_grid, self.N, c) * (1 + 1e-12)))


def concentration_tail(batch: ReplicaBatch, u_grid, time_index: int = -1, reference=None, alpha: float = 0.05) -> TailEstimate:
    """Empirical tails of the error at one observation time.

    ``c_fit`` is the largest c for which the envelope dominates the Wilson
    upper bound at every ``u > 0`` of the grid.
    """
    if batch.R < MIN_REPLICAS:
        raise InsufficientReplicas(f"need at least {MIN_REPLICAS} replicas, got {batch.R}")
    ref = batch.oracle if reference is None else np.broadcast_to(np.asarray(reference, dtype=float), batch.values.shape[1:])
    if ref is None:
        raise ValueError("no oracle values attached and no reference given")
    u = np.asarray(u_grid, dtype=float)
    if np.any(u < 0):
        raise ValueError("thresholds must be non-negative")
    err = np.abs(batch.values[:, time_index] - ref[time_index])
    counts = np.array([(err >= ui).sum() for ui in u])
    lo, hi = proportion_confint(counts, batch.R, alpha=alpha, method="wilson")
    lo, hi = np.atleast_1d(lo), np.atleast_1d(hi)
    pos = u > 0
    if np.any(pos):
        bounds = np.log(ENVELOPE_PREFACTOR / hi[pos]) * (1 + u[pos]) / (batch.N * u[pos] ** 2)
        c_fit = float(bounds.min())
    else:
        c_fit = float("inf")
    return TailEstimate(
        u_grid=u,
        counts=counts,
        empirical_tail=counts / batch.R,
        lower=lo,
        upper=hi,
        N=batch.N,
        R=batch.R,
        c_fit=c_fit,
    )


def stability_ratio(tails: list[TailEstimate]) -> float:
    """max/min of the fitted constants across an N grid."""
    cs = np.array([t.c_fit for t in tails])
    return float(cs.max() / cs.min())
