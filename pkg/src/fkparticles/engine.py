"""Continuous-time killing/cloning particle system.

The construction: N i.i.d. initial draws; free independent mutation; a Poisson
clock of intensity N K* proposing selection events; at a proposal, a killing
is accepted with probability sum_i K(1)(X^i) / (N K*); the victim is drawn
proportionally to its total rate and takes the position of a particle drawn
from the kernel (uniformly over the full sample for Fleming-Viot).

``run`` is the literal per-particle implementation and works for every
dynamics. ``run_counts`` is the compiled occupation-number equivalent for
finite chains, used for large replica batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidInitialLaw, RateBoundViolated, ZeroPotential
from .dynamics import Diffusion, DynamicsSpec, FiniteChain, mutate_many
from .kernels import KernelVariant, SelectionKernelSpec, kill_rates, rate_bound, sample_replacement_index
from .model import EmpiricalMeasure, Potential, TestFunction
from .rng import Streams, as_streams, exponential


@dataclass(frozen=True)
class InitialLaw:
    """Law of the N i.i.d. initial positions.

    ``categorical`` (finite spaces, ``weights``), ``point`` (``point`` is a state
    index or coordinates) or ``gaussian`` (``mean`` coordinates, scalar ``std``).
    """

    kind: str
    weights: tuple[float, ...] = ()
    point: tuple[float, ...] = ()
    mean: tuple[float, ...] = ()
    std: float = 1.0

    @classmethod
    def categorical(cls, weights):
        return cls("categorical", weights=tuple(float(w) for w in weights))

    @classmethod
    def point_mass(cls, point):
        return cls("point", point=tuple(np.atleast_1d(point).tolist()))

    @classmethod
    def gaussian(cls, mean, std: float = 1.0):
        return cls("gaussian", mean=tuple(np.atleast_1d(mean).astype(float).tolist()), std=float(std))

    def validate(self, dynamics: DynamicsSpec) -> None:
        finite = isinstance(dynamics, FiniteChain)
        if self.kind == "categorical":
            w = np.asarray(self.weights, dtype=float)
            if not finite:
                raise InvalidInitialLaw("categorical initial law needs a finite chain")
            if w.shape != (dynamics.size,) or np.any(w < 0) or abs(w.sum() - 1) > 1e-12:
                raise InvalidInitialLaw("initial weights must be a probability vector over the states")
        elif self.kind == "point":
            if finite:
                if len(self.point) != 1 or not 0 <= int(self.point[0]) < dynamics.size:
                    raise InvalidInitialLaw("point-mass initial state out of range")
            elif len(self.point) != dynamics.dim:
                raise InvalidInitialLaw("point-mass initial law has the wrong dimension")
        elif self.kind == "gaussian":
            if finite:
                raise InvalidInitialLaw("gaussian initial law needs a diffusion")
            if len(self.mean) != dynamics.dim or not self.std >= 0:
                raise InvalidInitialLaw("gaussian initial law has the wrong dimension or std")
        else:
            raise InvalidInitialLaw(f"unknown initial law {self.kind!r}")

    def sample(self, N: int, rng: np.random.Generator, dynamics: DynamicsSpec) -> np.ndarray:
        if self.kind == "categorical":
            w = np.asarray(self.weights, dtype=float)
            return np.minimum(np.searchsorted(np.cumsum(w), rng.random(N) * w.sum(), side="right"), len(w) - 1)
        if self.kind == "point":
            if isinstance(dynamics, FiniteChain):
                return np.full(N, int(self.point[0]), dtype=np.intp)
            return np.tile(np.asarray(self.point, dtype=float), (N, 1))
        mean = np.asarray(self.mean, dtype=float)
        return mean + self.std * rng.standard_normal((N, mean.shape[0]))


@dataclass(frozen=True)
class EngineConfig:
    N: int
    horizon: float
    obs_times: tuple[float, ...]
    dynamics: DynamicsSpec
    kernel: KernelVariant | SelectionKernelSpec
    potential: Potential
    initial_law: InitialLaw

    def __post_init__(self):
        if int(self.N) < 1:
            raise ValueError("N must be at least 1")
        obs = tuple(float(t) for t in self.obs_times)
        object.__setattr__(self, "obs_times", obs)
        if any(b < a for a, b in zip(obs, obs[1:])):
            raise ValueError("observation times must be sorted")
        if obs and (obs[0] < 0 or obs[-1] > self.horizon):
            raise ValueError("observation times must lie in [0, horizon]")
        self.initial_law.validate(self.dynamics)
        if isinstance(self.dynamics, FiniteChain) and self.potential.is_tabulated:
            if self.potential.values.shape[0] != self.dynamics.size:
                raise ValueError("potential table does not match the number of states")
        if isinstance(self.kernel, SelectionKernelSpec):
            try:
                needed = rate_bound(self.kernel.variant, self.potential)
            except ZeroPotential:
                needed = 0.0
            if self.kernel.rate_bound < needed:
                raise ValueError(f"kernel rate bound {self.kernel.rate_bound} below the required {needed}")

    @property
    def variant(self) -> KernelVariant:
        return self.kernel.variant if isinstance(self.kernel, SelectionKernelSpec) else KernelVariant(self.kernel)

    @property
    def kstar(self) -> float:
        """Rate bound in force, 0.0 when selection vanishes identically."""
        if isinstance(self.kernel, SelectionKernelSpec):
            return float(self.kernel.rate_bound)
        try:
            return rate_bound(self.variant, self.potential)
        except ZeroPotential:
            return 0.0


@dataclass
class ParticleSystemState:
    positions: np.ndarray
    time: float = 0.0
    event_count: int = 0
    proposal_count: int = 0
    streams: Streams | None = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return int(self.positions.shape[0])

    def measure(self) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.positions.copy())


def init(config: EngineConfig, rng) -> ParticleSystemState:
    streams = as_streams(rng)
    positions = config.initial_law.sample(config.N, streams.init, config.dynamics)
    return ParticleSystemState(positions=positions, time=0.0, streams=streams)


def observe(state: ParticleSystemState, f) -> float:
    if isinstance(f, TestFunction) or callable(f):
        return float(np.mean(f(state.positions)))
    return float(np.mean(np.asarray(f, dtype=float)[state.positions]))


def run(
    config: EngineConfig,
    rng,
    on_observe: Callable[[float, EmpiricalMeasure], None] | None = None,
    on_event: Callable[[float, int, int], None] | None = None,
) -> ParticleSystemState:
    """Simulate up to the horizon with the per-particle algorithm.

    ``on_observe(t, eta)`` fires at every observation time with the particles
    mutated exactly to ``t``. ``on_event(t, victim, source)`` fires at every
    accepted killing.
    """
    state = init(config, rng)
    s = state.streams
    N = config.N
    kstar = config.kstar
    V = config.potential
    variant = config.variant
    clock_rate = N * kstar
    obs = list(config.obs_times)
    k = 0

    t_event = exponential(s.clock, clock_rate) if clock_rate > 0 else np.inf
    while True:
        t_obs = obs[k] if k < len(obs) else np.inf
        t_next = min(t_event, t_obs, config.horizon)
        state.positions = mutate_many(config.dynamics, state.positions, t_next - state.time, s.mutation)
        state.time = t_next
        while k < len(obs) and obs[k] <= t_next:
            if on_observe is not None:
                on_observe(obs[k], state.measure())
            k += 1
        if t_event <= t_next and t_event <= config.horizon:
            state.proposal_count += 1
            rates = kill_rates(variant, V(state.positions))
            total = rates.sum()
            if total > clock_rate * (1 + 1e-9):
                raise RateBoundViolated(f"sum of kill rates {total} exceeds N K* = {clock_rate}")
            if s.thinning.random() * clock_rate < total:
                cum = np.cumsum(rates)
                victim = min(int(np.searchsorted(cum, s.victim.random() * cum[-1], side="right")), N - 1)
                eta = EmpiricalMeasure(state.positions)
                source = sample_replacement_index(variant, V, eta, state.positions[victim], s.clone)
                state.positions = state.positions.copy()
                state.positions[victim] = state.positions[source]
                state.event_count += 1
                if on_event is not None:
                    on_event(t_event, victim, source)
            t_event = t_event + exponential(s.clock, clock_rate)
        if state.time >= config.horizon and k >= len(obs):
            break
    return state


def _finite_initial_weights(config: EngineConfig) -> np.ndarray:
    law = config.initial_law
    d = config.dynamics.size
    if law.kind == "categorical":
        return np.asarray(law.weights, dtype=np.float64)
    w = np.zeros(d)
    w[int(law.point[0])] = 1.0
    return w


def run_counts_batch(config: EngineConfig, keys) -> tuple[np.ndarray, np.ndarray]:
    """Compiled finite-chain runs, one replica per 64-bit key.

    Returns ``(counts, accepted_killings)`` with ``counts`` of shape
    ``(len(keys), len(obs_times), n_states)``. The initial draw consumes the
    same uniforms as ``init`` does for ``Streams.from_key(key)``.
    """
    from ._fastchain import simulate_batch

    if not isinstance(config.dynamics, FiniteChain) or not config.potential.is_tabulated:
        raise TypeError("the compiled engine needs a finite chain with a tabulated potential")
    chain = config.dynamics
    L = chain.generator.entries
    jump = L - np.diag(np.diag(L))
    out, events, status = simulate_batch(
        np.asarray(keys, dtype=np.uint64),
        int(config.N),
        _finite_initial_weights(config),
        chain.generator.exit_rates.astype(np.float64),
        np.ascontiguousarray(jump, dtype=np.float64),
        np.ascontiguousarray(config.potential.values, dtype=np.float64),
        config.variant is KernelVariant.CENTERED,
        float(config.kstar),
        np.asarray(config.obs_times, dtype=np.float64),
        float(config.horizon),
    )
    if np.any(status != 0):
        bad = int(np.flatnonzero(status)[0])
        raise RateBoundViolated(f"replica {bad}: sum of kill rates exceeded N K*")
    return out, events


def run_counts(config: EngineConfig, rng) -> tuple[np.ndarray, int]:
    """Occupation counts at every observation time for one finite-chain replica."""
    streams = as_streams(rng)
    out, events = run_counts_batch(config, [streams.key])
    return out[0], int(events[0])
