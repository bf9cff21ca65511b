"""Domain types shared by the oracle, the kernels, the dynamics and the engine.

Points of a finite state space are integer indices. Points of a diffusion in
R^dim are float arrays whose last axis has length ``dim``; every closed-form
function below is evaluated on arrays of shape ``(..., dim)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionMismatch, NotAGenerator, UnboundedResult

ROW_SUM_TOL = 1e-12
PROB_TOL = 1e-12


@dataclass(frozen=True)
class FiniteStateSpace:
    size: int
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        if int(self.size) < 2:
            raise ValueError("a finite state space needs at least 2 states")
        if self.labels is not None:
            if len(self.labels) != self.size or len(set(self.labels)) != self.size:
                raise ValueError("labels must be distinct and one per state")


@dataclass(frozen=True, eq=False)
class GeneratorMatrix:
    """Rate matrix of a finite-state Markov jump process."""

    entries: np.ndarray

    def __post_init__(self):
        Q = np.array(self.entries, dtype=float)
        Q.setflags(write=False)
        object.__setattr__(self, "entries", Q)
        check_generator(Q)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def exit_rates(self) -> np.ndarray:
        return -np.diag(self.entries)

    def apply(self, f) -> np.ndarray:
        return self.entries @ np.asarray(f, dtype=float)


def check_generator(Q: np.ndarray) -> None:
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise DimensionMismatch(f"generator must be square, got shape {Q.shape}")
    if Q.shape[0] < 2:
        raise NotAGenerator("generator needs at least 2 states")
    if not np.all(np.isfinite(Q)):
        raise NotAGenerator("generator has non-finite entries")
    off = Q - np.diag(np.diag(Q))
    if np.any(off < 0):
        i, j = np.argwhere(off < 0)[0]
        raise NotAGenerator(f"negative off-diagonal rate at ({i}, {j})")
    scale = max(1.0, float(np.abs(Q).max()))
    rows = np.abs(Q.sum(axis=1))
    if np.any(rows > ROW_SUM_TOL * scale):
        i = int(np.argmax(rows))
        raise NotAGenerator(f"row {i} sums to {Q[i].sum():.3e}, not 0")


def as_generator(L) -> GeneratorMatrix:
    return L if isinstance(L, GeneratorMatrix) else GeneratorMatrix(np.asarray(L, dtype=float))


def check_probability(w, size: int | None = None) -> np.ndarray:
    """Validate and return a probability vector as a float array."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 1:
        raise DimensionMismatch("probability vector must be one-dimensional")
    if size is not None and w.shape[0] != size:
        raise DimensionMismatch(f"probability vector has length {w.shape[0]}, expected {size}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("probability vector has negative or non-finite weights")
    if abs(w.sum() - 1.0) > PROB_TOL * max(1, w.shape[0]):
        raise ValueError(f"probability vector sums to {w.sum()!r}")
    return w


def _closed_form_eval(fn, x, bound, what):
    vals = np.asarray(fn(np.asarray(x, dtype=float)), dtype=float)
    if vals.size and (not np.all(np.isfinite(vals)) or np.abs(vals).max() > bound * (1 + 1e-12)):
        raise UnboundedResult(f"{what} exceeds its declared bound {bound}")
    return vals


@dataclass(frozen=True, eq=False)
class Potential:
    """Bounded potential V, tabulated on a finite space or in closed form.

    ``constant`` may be declared for closed-form potentials that are constant;
    tabulated potentials detect it themselves.
    """

    sup_bound: float
    values: np.ndarray | None = None
    fn: Callable[[np.ndarray], np.ndarray] | None = None
    name: str = ""
    constant: float | None = None

    def __post_init__(self):
        if (self.values is None) == (self.fn is None):
            raise ValueError("give exactly one of values / fn")
        if self.values is not None:
            v = np.array(self.values, dtype=float)
            v.setflags(write=False)
            object.__setattr__(self, "values", v)
            if not np.all(np.isfinite(v)):
                raise UnboundedResult("potential table has non-finite entries")
            if np.abs(v).max() > self.sup_bound * (1 + 1e-12):
                raise UnboundedResult("potential table exceeds its declared sup bound")
            if self.constant is None and np.ptp(v) == 0:
                object.__setattr__(self, "constant", float(v[0]))
        if not np.isfinite(self.sup_bound) or self.sup_bound < 0:
            raise UnboundedResult("sup bound must be finite and non-negative")

    @classmethod
    def table(cls, values: Sequence[float], sup_bound: float | None = None, name: str = "table"):
        v = np.asarray(values, dtype=float)
        bound = float(np.abs(v).max()) if sup_bound is None else float(sup_bound)
        return cls(sup_bound=bound, values=v, name=name)

    @classmethod
    def function(cls, fn, sup_bound: float, name: str = "", constant: float | None = None):
        return cls(sup_bound=float(sup_bound), fn=fn, name=name, constant=constant)

    @property
    def is_tabulated(self) -> bool:
        return self.values is not None

    @property
    def is_constant(self) -> bool:
        return self.constant is not None

    def __call__(self, x) -> np.ndarray:
        if self.values is not None:
            return self.values[np.asarray(x, dtype=np.intp)]
        return _closed_form_eval(self.fn, x, self.sup_bound, f"potential {self.name!r}")


@dataclass(frozen=True, eq=False)
class TestFunction:
    """Bounded test function f with declared sup and Lipschitz bounds."""

    __test__ = False  # not a pytest class

    sup_bound: float
    values: np.ndarray | None = None
    fn: Callable[[np.ndarray], np.ndarray] | None = None
    lipschitz: float = float("inf")
    name: str = ""

    def __post_init__(self):
        if (self.values is None) == (self.fn is None):
            raise ValueError("give exactly one of values / fn")
        if self.values is not None:
            v = np.array(self.values, dtype=float)
            v.setflags(write=False)
            object.__setattr__(self, "values", v)
            if not np.all(np.isfinite(v)):
                raise ValueError("test function must be finite at every state")

    @classmethod
    def table(cls, values: Sequence[float], name: str = "table"):
        v = np.asarray(values, dtype=float)
        return cls(sup_bound=float(np.abs(v).max()), values=v, name=name)

    @classmethod
    def indicator(cls, state: int, size: int):
        v = np.zeros(size)
        v[state] = 1.0
        return cls.table(v, name=f"indicator[{state}]")

    @classmethod
    def function(cls, fn, sup_bound: float, lipschitz: float = float("inf"), name: str = ""):
        return cls(sup_bound=float(sup_bound), fn=fn, lipschitz=float(lipschitz), name=name)

    @property
    def is_tabulated(self) -> bool:
        return self.values is not None

    def __call__(self, x) -> np.ndarray:
        if self.values is not None:
            return self.values[np.asarray(x, dtype=np.intp)]
        return _closed_form_eval(self.fn, x, self.sup_bound, f"test function {self.name!r}")


def as_vector(f, size: int | None = None) -> np.ndarray:
    """Per-state values of a tabulated test function, potential or raw array."""
    if isinstance(f, (TestFunction, Potential)):
        if f.values is None:
            raise DimensionMismatch("closed-form function used where a per-state vector is needed")
        v = np.asarray(f.values, dtype=float)
    else:
        v = np.asarray(f, dtype=float)
    if v.ndim != 1:
        raise DimensionMismatch("per-state vector must be one-dimensional")
    if size is not None and v.shape[0] != size:
        raise DimensionMismatch(f"vector has length {v.shape[0]}, expected {size}")
    return v


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Uniform-weight measure on N particle positions."""

    positions: np.ndarray = field()

    def __post_init__(self):
        pos = np.array(self.positions)
        if pos.shape[0] < 1:
            raise ValueError("an empirical measure needs at least one particle")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @property
    def N(self) -> int:
        return int(self.positions.shape[0])

    def integrate(self, g) -> float:
        if callable(g):
            vals = g(self.positions)
        else:
            vals = np.asarray(g, dtype=float)[self.positions]
        return float(np.mean(vals))

    def occupancy(self, size: int) -> np.ndarray:
        """Fraction of particles in each state (finite spaces only)."""
        return np.bincount(self.positions.astype(np.intp), minlength=size) / self.N
