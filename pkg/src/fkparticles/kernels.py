"""Mean-field selection kernels: Fleming-Viot and the centered low-variance variant.

For an empirical measure eta on N positions and a point x:

* Fleming-Viot: ``K(x, dy) = V(x) eta(dy)``, total rate ``V(x)``.
* Centered: ``K(x, dy) = (V(x) - eta V)_+ eta(dy) + (V(y) - eta V)_- eta(dy)``,
  total rate ``(V(x) - eta V)_+ + eta((V - eta V)_-)``.

Both satisfy ``eta(S_eta f) = eta(f) eta(V) - eta(V f)`` where S_eta is the
jump generator of K.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import NegativePotentialForFV, ZeroPotential, ZeroRate
from .model import EmpiricalMeasure, Potential, as_vector


class KernelVariant(str, enum.Enum):
    FLEMING_VIOT = "fleming_viot"
    CENTERED = "centered"


@dataclass(frozen=True)
class SelectionKernelSpec:
    variant: KernelVariant
    rate_bound: float


def _variant(spec) -> KernelVariant:
    if isinstance(spec, SelectionKernelSpec):
        return spec.variant
    return KernelVariant(spec)


def _check_fv_sign(values) -> None:
    if np.any(np.asarray(values) < 0):
        raise NegativePotentialForFV("the Fleming-Viot kernel needs V >= 0")


def rate_bound(spec, V: Potential) -> float:
    """K* dominating every total rate: |V|_inf (FV) or 2 |V|_inf (centered)."""
    variant = _variant(spec)
    if variant is KernelVariant.FLEMING_VIOT:
        if V.is_tabulated:
            _check_fv_sign(V.values)
        if V.sup_bound == 0 or V.constant == 0:
            raise ZeroPotential("V vanishes: no selection events")
        return float(V.sup_bound)
    if V.is_constant or V.sup_bound == 0:
        raise ZeroPotential("the centered kernel vanishes for constant V")
    return 2.0 * float(V.sup_bound)


def _mean(v: np.ndarray) -> float:
    # Exact for constant v, so the centered kernel vanishes identically there.
    return float(v[0]) if v.min() == v.max() else float(v.mean())


def make_kernel(variant, V: Potential) -> SelectionKernelSpec:
    """Kernel spec with its rate bound; raises ZeroPotential when selection is void."""
    variant = KernelVariant(variant)
    return SelectionKernelSpec(variant, rate_bound(variant, V))


def kill_rates(spec, v: np.ndarray) -> np.ndarray:
    """Total rates ``K_eta(1)(x_i)`` for every particle, given ``v[i] = V(x_i)``."""
    v = np.asarray(v, dtype=float)
    if _variant(spec) is KernelVariant.FLEMING_VIOT:
        _check_fv_sign(v)
        return v.copy()
    w = v - _mean(v)
    return np.maximum(w, 0.0) + np.mean(np.maximum(-w, 0.0))


def total_rate(spec, V: Potential, eta: EmpiricalMeasure, x) -> float:
    vx = float(np.asarray(V(x)).reshape(()))
    v = V(eta.positions)
    if _variant(spec) is KernelVariant.FLEMING_VIOT:
        _check_fv_sign(v)
        _check_fv_sign(vx)
        return vx
    ev = _mean(v)
    return max(vx - ev, 0.0) + float(np.mean(np.maximum(ev - v, 0.0)))


def replacement_law(spec, V: Potential, eta: EmpiricalMeasure, x) -> np.ndarray:
    """Probability that the replacement is position j, for every j (analytic)."""
    N = eta.N
    vx = float(np.asarray(V(x)).reshape(()))
    v = V(eta.positions)
    if _variant(spec) is KernelVariant.FLEMING_VIOT:
        _check_fv_sign(v)
        if vx <= 0:
            raise ZeroRate("zero total rate at x")
        return np.full(N, 1.0 / N)
    ev = _mean(v)
    uniform_mass = max(vx - ev, 0.0)
    weighted = np.maximum(ev - v, 0.0) / N
    total = uniform_mass + weighted.sum()
    if total <= 0:
        raise ZeroRate("zero total rate at x")
    return (uniform_mass / N + weighted) / total


def _inverse_cdf(weights: np.ndarray, u: float) -> int:
    # Fixed index order; a draw on a boundary goes to the next index, so
    # zero-weight entries are never selected.
    cum = np.cumsum(weights)
    j = int(np.searchsorted(cum, u * cum[-1], side="right"))
    return min(j, len(weights) - 1)


def sample_replacement_index(spec, V: Potential, eta: EmpiricalMeasure, x, rng: np.random.Generator) -> int:
    N = eta.N
    vx = float(np.asarray(V(x)).reshape(()))
    v = V(eta.positions)
    if _variant(spec) is KernelVariant.FLEMING_VIOT:
        _check_fv_sign(v)
        if vx <= 0:
            raise ZeroRate("zero total rate at x")
        return min(int(rng.random() * N), N - 1)
    ev = _mean(v)
    uniform_mass = max(vx - ev, 0.0)
    neg = np.maximum(ev - v, 0.0)
    weighted_mass = neg.sum() / N
    if uniform_mass + weighted_mass <= 0:
        raise ZeroRate("zero total rate at x")
    # Pick the part first, then the target inside it.
    if rng.random() * (uniform_mass + weighted_mass) < uniform_mass:
        return min(int(rng.random() * N), N - 1)
    return _inverse_cdf(neg, rng.random())


def sample_replacement(spec, V: Potential, eta: EmpiricalMeasure, x, rng: np.random.Generator):
    return eta.positions[sample_replacement_index(spec, V, eta, x, rng)]


def kernel_matrix(spec, v: np.ndarray) -> np.ndarray:
    """Kernel mass ``K_eta(x_i, {x_j})`` between particles, by explicit enumeration."""
    v = np.asarray(v, dtype=float)
    N = v.shape[0]
    if _variant(spec) is KernelVariant.FLEMING_VIOT:
        _check_fv_sign(v)
        return np.repeat(v[:, None], N, axis=1) / N
    w = v - _mean(v)
    return (np.maximum(w, 0.0)[:, None] + np.maximum(-w, 0.0)[None, :]) / N


def mean_field_identity_residual(spec, V: Potential, eta: EmpiricalMeasure, f) -> float:
    """``|eta(S_eta f) - [eta(f) eta(V) - eta(V f)]|`` with eta(S_eta f) by double summation."""
    v = V(eta.positions)
    fv = f(eta.positions) if callable(f) else as_vector(f)[eta.positions]
    K = kernel_matrix(spec, v)
    N = eta.N
    lhs = 0.0
    for i in range(N):
        lhs += np.sum((fv - fv[i]) * K[i])
    lhs /= N
    rhs = fv.mean() * v.mean() - np.mean(v * fv)
    return float(abs(lhs - rhs))


def selection_generator(spec, V, mu) -> np.ndarray:
    """Matrix of S_mu on a finite space for a probability vector mu."""
    v = as_vector(V)
    mu = np.asarray(mu, dtype=float)
    if _variant(spec) is KernelVariant.FLEMING_VIOT:
        _check_fv_sign(v)
        K = v[:, None] * mu[None, :]
    else:
        w = v - mu @ v
        K = (np.maximum(w, 0.0)[:, None] + np.maximum(-w, 0.0)[None, :]) * mu[None, :]
    np.fill_diagonal(K, 0.0)
    return K - np.diag(K.sum(axis=1))


def mean_field_generator(L, spec, V, mu) -> np.ndarray:
    """``L + S_mu`` as a dense generator matrix."""
    from .model import as_generator

    return as_generator(L).entries + selection_generator(spec, V, mu)
