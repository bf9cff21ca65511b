"""Mutation backends: finite-state jump chains and additive-noise diffusions.

Diffusions follow ``dX = b(X) dt + sqrt(2) dB`` and are integrated with
fixed-step Euler-Maruyama. Finite chains are simulated exactly from their
holding times and jump law.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .errors import GridTouchesSingularity, NonFiniteState, UnboundedResult
from .model import GeneratorMatrix, Potential, as_generator


def _neg_cubic(x):
    return -(x**3)


def _double_well(x):
    return x - x**3


def _signed_square(x):
    return -x * np.abs(x)


CUSTOM_DRIFTS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "neg_cubic": _neg_cubic,
    "double_well": _double_well,
    "signed_square": _signed_square,
}


@dataclass(frozen=True)
class DriftSpec:
    """Drift field b on R^dim, applied coordinate-wise.

    ``polynomial`` holds one ascending coefficient list per dimension, so
    ``((0, 0, 1),)`` is b(x) = x^2 in one dimension. ``ou`` is b(x) = -mu x.
    """

    form: str
    coefficients: tuple[tuple[float, ...], ...] = ()
    mu: float = 1.0
    name: str = ""

    def __post_init__(self):
        if self.form == "polynomial":
            coeffs = tuple(tuple(float(c) for c in row) for row in self.coefficients)
            if not coeffs or not all(np.all(np.isfinite(r)) for r in coeffs):
                raise ValueError("polynomial drift needs finite coefficients")
            object.__setattr__(self, "coefficients", coeffs)
        elif self.form == "ou":
            if not np.isfinite(self.mu):
                raise ValueError("OU rate must be finite")
        elif self.form == "custom":
            if self.name not in CUSTOM_DRIFTS:
                raise ValueError(f"unknown builtin drift {self.name!r}")
        else:
            raise ValueError(f"unknown drift form {self.form!r}")

    @classmethod
    def polynomial(cls, *coefficients):
        return cls("polynomial", coefficients=tuple(tuple(c) for c in coefficients))

    @classmethod
    def ornstein_uhlenbeck(cls, mu: float = 1.0):
        return cls("ou", mu=float(mu))

    @classmethod
    def custom(cls, name: str):
        return cls("custom", name=name)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.form == "ou":
            return -self.mu * x
        if self.form == "custom":
            return CUSTOM_DRIFTS[self.name](x)
        out = np.zeros_like(x)
        dim = x.shape[-1]
        if len(self.coefficients) not in (1, dim):
            raise ValueError(f"drift has {len(self.coefficients)} coefficient rows for dim {dim}")
        for k in range(dim):
            row = self.coefficients[k if len(self.coefficients) == dim else 0]
            # np.polynomial wants ascending order, which is how rows are stored
            out[..., k] = np.polynomial.polynomial.polyval(x[..., k], row)
        return out


@dataclass(frozen=True, eq=False)
class FiniteChain:
    generator: GeneratorMatrix

    def __post_init__(self):
        L = as_generator(self.generator)
        object.__setattr__(self, "generator", L)
        off = L.entries - np.diag(np.diag(L.entries))
        object.__setattr__(self, "_jump_cum", np.cumsum(off, axis=1))

    @property
    def size(self) -> int:
        return self.generator.size


@dataclass(frozen=True)
class Diffusion:
    drift: DriftSpec
    dim: int = 1
    step: float = 1e-2

    def __post_init__(self):
        if int(self.dim) < 1:
            raise ValueError("dimension must be positive")
        if not 0 < self.step <= 0.1:
            raise ValueError("Euler-Maruyama step must lie in (0, 0.1]")


DynamicsSpec = Union[FiniteChain, Diffusion]


def _chain_many(spec: FiniteChain, states: np.ndarray, dt: float, rng) -> np.ndarray:
    states = np.array(states, dtype=np.intp, copy=True)
    exit_rates = spec.generator.exit_rates
    cum = spec._jump_cum
    remaining = np.full(states.shape[0], float(dt))
    active = (exit_rates[states] > 0) & (remaining > 0)
    while active.any():
        idx = np.flatnonzero(active)
        hold = rng.standard_exponential(idx.size) / exit_rates[states[idx]]
        jumps = hold < remaining[idx]
        remaining[idx] -= hold
        remaining[idx[~jumps]] = 0.0
        jidx = idx[jumps]
        if jidx.size:
            u = rng.random(jidx.size)
            rows = cum[states[jidx]]
            target = np.sum(rows <= (u * rows[:, -1])[:, None], axis=1)
            states[jidx] = np.minimum(target, spec.size - 1)
        active = (exit_rates[states] > 0) & (remaining > 0)
    return states


def _euler_maruyama(spec: Diffusion, x: np.ndarray, dt: float, rng) -> np.ndarray:
    x = np.array(x, dtype=float, copy=True)
    n_full = int(np.floor(dt / spec.step + 1e-12))
    last = dt - n_full * spec.step
    steps = [spec.step] * n_full
    if last > 1e-12 * spec.step:
        steps.append(last)
    with np.errstate(over="ignore", invalid="ignore"):
        for h in steps:
            x += spec.drift(x) * h + np.sqrt(2.0 * h) * rng.standard_normal(x.shape)
    if not np.all(np.isfinite(x)):
        raise NonFiniteState("diffusion iterate left the finite range (drift blow-up)")
    return x


def mutate_many(spec: DynamicsSpec, xs, dt: float, rng: np.random.Generator) -> np.ndarray:
    """Independent mutation of every point of ``xs`` over a window ``dt``.

    Finite chains take an integer array of states; diffusions an array of
    shape ``(n, dim)``.
    """
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if isinstance(spec, FiniteChain):
        if dt == 0:
            return np.array(xs, dtype=np.intp, copy=True)
        return _chain_many(spec, xs, dt, rng)
    xs = np.asarray(xs, dtype=float)
    if dt == 0:
        return xs.copy()
    return _euler_maruyama(spec, xs, dt, rng)


def mutate(spec: DynamicsSpec, x, dt: float, rng: np.random.Generator):
    if isinstance(spec, FiniteChain):
        return int(mutate_many(spec, np.array([x]), dt, rng)[0])
    x = np.asarray(x, dtype=float).reshape(1, spec.dim)
    return mutate_many(spec, x, dt, rng)[0]


# Closed-form positive functions h with bounded log and two bounded derivatives.
# Each entry returns (h, h', h'') as ratios to h: (1, h'/h, h''/h).
@dataclass(frozen=True)
class HBuiltin:
    name: str
    log_ratios: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
    log_h: Callable[[np.ndarray], np.ndarray]


def _exp_tanh_ratios(x):
    s2 = 1.0 / np.cosh(x) ** 2
    return s2, s2**2 - 2.0 * np.tanh(x) * s2


def _exp_sin_ratios(x):
    return np.cos(x), np.cos(x) ** 2 - np.sin(x)


def _zero_ratios(x):
    z = np.zeros_like(x)
    return z, z


H_BUILTINS: dict[str, HBuiltin] = {
    "one": HBuiltin("one", _zero_ratios, lambda x: np.zeros_like(x)),
    "constant": HBuiltin("constant", _zero_ratios, lambda x: np.zeros_like(x)),
    "exp_tanh": HBuiltin("exp_tanh", _exp_tanh_ratios, np.tanh),
    "exp_sin": HBuiltin("exp_sin", _exp_sin_ratios, np.sin),
}

PROBE_HALF_WIDTH = 60.0
PROBE_POINTS = 48001


def eigen_potential_from_h(h_spec: str, b: DriftSpec) -> Potential:
    """Potential ``V = h^{-1} (h'' + b h')`` making h an eigenfunction with lambda = 0.

    The declared sup bound is the maximum over a wide probe grid with a 1%
    margin. The result is rejected when |V| still grows over the outer part of
    the grid, which is how h choices incompatible with the drift show up.
    """
    h = H_BUILTINS[h_spec] if isinstance(h_spec, str) else h_spec

    def V(x):
        x1 = np.asarray(x, dtype=float)[..., 0]
        r1, r2 = h.log_ratios(x1)
        bx = b(np.asarray(x, dtype=float))[..., 0]
        return r2 + bx * r1

    grid = np.linspace(-PROBE_HALF_WIDTH, PROBE_HALF_WIDTH, PROBE_POINTS)
    with np.errstate(over="ignore", invalid="ignore"):
        vals = V(grid[:, None])
    if not np.all(np.isfinite(vals)):
        raise UnboundedResult(f"V from h={h.name!r} is not finite on the probe grid")
    a = np.abs(grid)
    outer = np.abs(vals[a >= PROBE_HALF_WIDTH / 2]).max()
    inner = np.abs(vals[(a >= PROBE_HALF_WIDTH / 4) & (a < PROBE_HALF_WIDTH / 2)]).max()
    vmax = np.abs(vals).max()
    if vmax > 1e8 or (outer > 1.5 * inner and outer > 1e-6 * max(vmax, 1.0) and outer > 1.0):
        raise UnboundedResult(f"V from h={h.name!r} grows without bound under drift {b}")
    if vmax == 0.0:
        return Potential.function(V, 0.0, name=f"from_h[{h.name}]", constant=0.0)
    return Potential.function(V, 1.01 * vmax, name=f"from_h[{h.name}]")


def lyapunov_residual(spec: Diffusion, m: float, V: Potential, lam: float, grid, delta: float = 1.0) -> np.ndarray:
    """``L phi + (delta - V + lam) phi`` for ``phi(x) = 2 (1 - (1+m)/|x|)`` in one dimension.

    Non-positive values mean the drift condition holds at that point.
    """
    if spec.dim != 1:
        raise ValueError("the Lyapunov check is one-dimensional")
    x = np.asarray(grid, dtype=float).ravel()
    if np.any(np.abs(x) <= 1e-8 * (1 + abs(m))):
        raise GridTouchesSingularity("grid touches the singularity of phi at 0")
    a = np.abs(x)
    c = 1.0 + m
    phi = 2.0 * (1.0 - c / a)
    dphi = 2.0 * c * np.sign(x) / a**2
    d2phi = -4.0 * c / a**3
    bx = spec.drift(x[:, None])[:, 0]
    Vx = V(x[:, None])
    return d2phi + bx * dphi + (delta - Vx + lam) * phi
