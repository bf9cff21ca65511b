"""Exact finite-state evaluation of the Feynman-Kac semigroup and its flow.

On a finite space the unnormalized semigroup is ``exp(t M)`` with the tilted
generator ``M = L - diag(V)``. Everything here is deterministic linear algebra
and serves as ground truth for the particle simulations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.sparse.csgraph import connected_components

from .errors import (
    DegenerateNormalizer,
    DegenerateSpectrum,
    DimensionMismatch,
    IndexOutOfRange,
    NegativeTime,
    NonpositiveEigenfunction,
    Reducible,
)
from .model import GeneratorMatrix, Potential, as_generator, as_vector, check_probability

NORMALIZER_FLOOR = 1e-300
SPECTRAL_GAP_TOL = 1e-10


class SemigroupOracle:
    """Tilted generator ``M = L - diag(V)`` with a cached spectral decomposition."""

    def __init__(self, L: GeneratorMatrix, V: Potential):
        self.generator = L
        self.potential = V
        M = L.entries - np.diag(V.values)
        M.setflags(write=False)
        self.tilted_generator = M
        self.eigenvalues, self.right_vectors = np.linalg.eig(M)
        self.left_eigenvalues, self.left_vectors = np.linalg.eig(M.T)
        self._cache: dict[float, np.ndarray] = {}

    @property
    def size(self) -> int:
        return self.tilted_generator.shape[0]

    def propagator(self, t: float) -> np.ndarray:
        """Dense ``exp(t M)``; memoised per time value."""
        t = float(t)
        if t < 0:
            raise NegativeTime(f"time must be non-negative, got {t}")
        E = self._cache.get(t)
        if E is None:
            E = np.eye(self.size) if t == 0 else scipy.linalg.expm(t * self.tilted_generator)
            if len(self._cache) > 4096:
                self._cache.clear()
            self._cache[t] = E
        return E


def build_oracle(L, V) -> SemigroupOracle:
    L = as_generator(L)
    if not isinstance(V, Potential):
        V = Potential.table(V)
    if not V.is_tabulated:
        raise DimensionMismatch("the exact oracle needs a tabulated potential")
    if V.values.shape[0] != L.size:
        raise DimensionMismatch(f"potential has {V.values.shape[0]} entries for {L.size} states")
    return SemigroupOracle(L, V)


def unnormalized_semigroup(oracle: SemigroupOracle, t: float, f) -> np.ndarray:
    f = as_vector(f, oracle.size)
    if t < 0:
        raise NegativeTime(f"time must be non-negative, got {t}")
    if t == 0:
        return f.copy()
    return oracle.propagator(t) @ f


def normalized_flow(oracle: SemigroupOracle, eta, t: float, f) -> float:
    """``eta Q_t(f) / eta Q_t(1)``."""
    eta = check_probability(eta, oracle.size)
    f = as_vector(f, oracle.size)
    if t == 0:
        return float(eta @ f)
    row = eta @ oracle.propagator(t)
    z = row.sum()
    if not z > NORMALIZER_FLOOR:
        raise DegenerateNormalizer(f"eta Q_t(1) = {z!r}")
    return float(row @ f / z)


def flow_measure(oracle: SemigroupOracle, eta, t: float) -> np.ndarray:
    """The probability vector Phi_t(eta)."""
    eta = check_probability(eta, oracle.size)
    row = eta @ oracle.propagator(t)
    z = row.sum()
    if not z > NORMALIZER_FLOOR:
        raise DegenerateNormalizer(f"eta Q_t(1) = {z!r}")
    return row / z


@dataclass(frozen=True)
class EigenElements:
    """Principal eigen-elements with the convention ``Q_t h = exp(-lambda t) h``."""

    lam: float
    h: np.ndarray
    qsd: np.ndarray


def is_irreducible(M: np.ndarray) -> bool:
    adj = (M - np.diag(np.diag(M))) > 0
    n, _ = connected_components(adj, directed=True, connection="strong")
    return n == 1


def principal_eigen(oracle: SemigroupOracle) -> EigenElements:
    M = oracle.tilted_generator
    if not is_irreducible(M):
        raise Reducible("tilted generator is not irreducible")

    order = np.argsort(-oracle.eigenvalues.real)
    mu = oracle.eigenvalues[order[0]]
    if len(order) > 1 and oracle.eigenvalues[order[0]].real - oracle.eigenvalues[order[1]].real < SPECTRAL_GAP_TOL:
        raise DegenerateSpectrum("principal eigenvalue is not simple")
    h = np.real(oracle.right_vectors[:, order[0]])
    h = h / h[np.argmax(np.abs(h))]
    if np.any(h <= 0):
        raise NonpositiveEigenfunction("principal right eigenvector is not positive")
    h = h / h.max()

    lorder = np.argsort(-oracle.left_eigenvalues.real)
    q = np.real(oracle.left_vectors[:, lorder[0]])
    q = q / q.sum()
    if np.any(q < -1e-12):
        raise NonpositiveEigenfunction("principal left eigenvector has negative entries")
    q = np.clip(q, 0.0, None)
    q = q / q.sum()
    return EigenElements(lam=float(-mu.real), h=h, qsd=q)


def h_transform(oracle: SemigroupOracle, eig: EigenElements, t: float, f) -> np.ndarray:
    """``exp(lambda t) h^{-1} Q_t(h f)``, a Markov semigroup."""
    if np.any(eig.h <= 0):
        raise NonpositiveEigenfunction("h must be positive")
    f = as_vector(f, oracle.size)
    return np.exp(eig.lam * t) * unnormalized_semigroup(oracle, t, eig.h * f) / eig.h


def carre_du_champ(G, f) -> np.ndarray:
    """Per-state ``0.5 * sum_y (f(y) - f(x))**2 G(x, y)`` for a jump generator."""
    G = as_generator(G).entries
    f = as_vector(f, G.shape[0])
    diff = f[None, :] - f[:, None]
    off = G - np.diag(np.diag(G))
    return 0.5 * np.sum(diff**2 * off, axis=1)


def carre_du_champ_jump(G, f, x: int) -> float:
    G = as_generator(G)
    if not 0 <= int(x) < G.size:
        raise IndexOutOfRange(f"state {x} outside 0..{G.size - 1}")
    return float(carre_du_champ(G, f)[int(x)])


def carre_du_champ_algebraic(G, f) -> np.ndarray:
    """``0.5 (G(f^2) - 2 f G(f))``; equals the jump formula for any generator matrix."""
    G = as_generator(G).entries
    f = as_vector(f, G.shape[0])
    return 0.5 * (G @ (f * f) - 2 * f * (G @ f))


@dataclass(frozen=True)
class AssumptionDiagnostics:
    times: np.ndarray
    c_minus: float
    C_plus: float
    w1_profile: np.ndarray
    fitted_decay_rate: float
    fitted_prefactor: float
    gamma_one_profile: np.ndarray  # exp(lam t) sup_x sqrt(Gamma_L(Q_t 1))
    w2_profile: np.ndarray  # exp(lam t) sup_x sqrt(Gamma_L(Q_t(f - qsd f))) / |f|_inf
    w2_decay_rate: float


def _tail_log_fit(times, profile):
    """Least-squares slope/intercept of log(profile) over the tail half of the grid.

    Points already at round-off level are dropped; the profile must keep at least
    two resolvable points or the fit degenerates to ``-inf``.
    """
    floor = 1e-13 * max(profile.max(), np.finfo(float).tiny)
    half = len(times) // 2
    mask = np.zeros(len(times), dtype=bool)
    mask[half:] = True
    mask &= profile > floor
    if mask.sum() < 2:
        mask = profile > floor
    if mask.sum() < 2:
        return float("-inf"), 0.0
    slope, icpt = np.polyfit(times[mask], np.log(profile[mask]), 1)
    return float(slope), float(np.exp(icpt))


def assumption_diagnostics(oracle: SemigroupOracle, eig: EigenElements, f, horizon: float, grid_step: float) -> AssumptionDiagnostics:
    if not horizon > 0 or not grid_step > 0:
        raise ValueError("horizon and grid_step must be positive")
    f = as_vector(f, oracle.size)
    L = oracle.generator
    n = int(np.floor(horizon / grid_step + 1e-9))
    times = grid_step * np.arange(n + 1)
    g = f - eig.qsd @ f
    fnorm = np.abs(f).max()
    ones = np.ones(oracle.size)

    q1 = np.empty((len(times), oracle.size))
    w1 = np.empty(len(times))
    gam1 = np.empty(len(times))
    w2 = np.empty(len(times))
    for k, t in enumerate(times):
        E = oracle.propagator(t)
        scale = np.exp(eig.lam * t)
        q1[k] = scale * (E @ ones)
        qg = scale * (E @ g)
        w1[k] = np.abs(qg).max() / fnorm if fnorm > 0 else 0.0
        gam1[k] = np.sqrt(carre_du_champ(L, q1[k]).max())
        w2[k] = np.sqrt(carre_du_champ(L, qg).max()) / fnorm if fnorm > 0 else 0.0

    rate, pref = _tail_log_fit(times, w1)
    rate2, _ = _tail_log_fit(times, w2)
    return AssumptionDiagnostics(
        times=times,
        c_minus=float(q1.min()),
        C_plus=float(q1.max()),
        w1_profile=w1,
        fitted_decay_rate=rate,
        fitted_prefactor=pref,
        gamma_one_profile=gam1,
        w2_profile=w2,
        w2_decay_rate=rate2,
    )


def kolmogorov_residual(oracle: SemigroupOracle, eta, f, t: float, dt: float, kernel=None) -> float:
    """Mismatch between d/dt Phi_t(eta)(f) and Phi_t(eta)(L_{Phi_t(eta)} f).

    The time derivative is a second-order finite difference (centered when
    ``t >= dt``, one-sided three-point otherwise). The right-hand side uses the
    mean-field identity ``mu(S_mu f) = mu(f) mu(V) - mu(V f)``, or the explicit
    selection operator of ``kernel`` when a kernel variant is given.
    """
    if t < 0:
        raise NegativeTime(str(t))
    if not 0 < dt <= 1e-3:
        raise ValueError("dt must lie in (0, 1e-3]")
    f = as_vector(f, oracle.size)

    def phi(s):
        return normalized_flow(oracle, eta, s, f)

    if t >= dt:
        deriv = (phi(t + dt) - phi(t - dt)) / (2 * dt)
    else:
        deriv = (-3 * phi(t) + 4 * phi(t + dt) - phi(t + 2 * dt)) / (2 * dt)

    mu = flow_measure(oracle, eta, t)
    Lf = oracle.generator.entries @ f
    V = oracle.potential.values
    if kernel is None:
        selection = (mu @ f) * (mu @ V) - mu @ (V * f)
    else:
        from .kernels import selection_generator

        selection = mu @ (selection_generator(kernel, V, mu) @ f)
    return float(abs(deriv - (mu @ Lf + selection)))
