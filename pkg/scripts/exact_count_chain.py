"""Exact law of the 2-state particle system, through its occupation count.

With L = [[-1, 1], [1, -1]] and V = (0, 1), the number k of particles in state 1
is a birth-death chain on {0..N}:

    k -> k+1 at rate (N - k)                (mutation 0 -> 1)
    k -> k-1 at rate k + k (N - k) / N      (mutation 1 -> 0, plus a state-1
                                             particle killed and replaced by a
                                             state-0 copy)

Both selection kernels give these rates in this scenario. The centered kernel
kills state-1 particles at rate (1 - k/N) + k(N-k)/N^2 and sends the
replacement to state 0 with total weight (N-k)/N; a killed state-0 particle
only ever copies another state-0 particle. So the two laws coincide.

Run as a script to print the exact bias and L2 error of eta^N_t(1_{1}).
"""

from __future__ import annotations

import argparse

import numpy as np
from scipy.linalg import expm
from scipy.stats import binom


def count_generator(N: int) -> np.ndarray:
    k = np.arange(N + 1, dtype=float)
    up = N - k
    down = k + k * (N - k) / N
    Q = np.diag(up[:-1], 1) + np.diag(down[1:], -1)
    return Q - np.diag(Q.sum(axis=1))


def count_law(N: int, t: float, p0: float = 0.5) -> np.ndarray:
    """P(k particles in state 1 at time t), starting from N i.i.d. Bernoulli(p0) draws."""
    start = binom.pmf(np.arange(N + 1), N, p0)
    law = start @ expm(t * count_generator(N))
    return np.clip(law, 0.0, None) / np.clip(law, 0.0, None).sum()


def flow(t: float, p0: float = 0.5) -> float:
    """Phi_t(eta_0)(1_{1}) for eta_0 = (1-p0, p0), by a closed-form 2x2 exponential."""
    M = np.array([[-1.0, 1.0], [1.0, -2.0]])
    row = np.array([1 - p0, p0]) @ expm(t * M)
    return float(row[1] / row.sum())


def error_moments(N: int, t: float, p0: float = 0.5) -> dict:
    law = count_law(N, t, p0)
    err = np.arange(N + 1) / N - flow(t, p0)
    return {
        "bias": float(law @ err),
        "l2": float(np.sqrt(law @ err**2)),
        "tail_0.1": float(law[np.abs(err) >= 0.1].sum()),
    }


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--t", type=float, default=5.0)
    p.add_argument("--n", type=int, nargs="+", default=[64, 128, 256, 512])
    args = p.parse_args()
    print(f"{'N':>6} {'bias':>14} {'N*bias':>10} {'l2':>12} {'sqrt(N)*l2':>11} {'P(|err|>=0.1)':>14}")
    for N in args.n:
        m = error_moments(N, args.t)
        print(f"{N:>6} {m['bias']:>14.6e} {N * m['bias']:>10.5f} {m['l2']:>12.6e} {np.sqrt(N) * m['l2']:>11.5f} {m['tail_0.1']:>14.4e}")


if __name__ == "__main__":
    main()
