"""Compiled occupation-number simulation of the particle system on a finite space.

Only the vector of per-state counts is tracked. Because the particles are
exchangeable, this has the same law for the empirical measure as the
per-particle engine. Mutations run as a Gillespie process on the counts.
Selection keeps the dominating Poisson clock of intensity N K*, the thinning
test, the rate-proportional victim and the kernel-drawn replacement.

Randomness comes from the in-kernel Philox streams of ``_philox``, one key per
replica and one counter region per purpose, so a whole batch runs without
returning to Python.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from ._philox import new_streams, next_double, next_exponential

STATUS_OK = 0
STATUS_RATE_BOUND = 1

# Purpose indices, mirrored from rng.Purpose.
P_MUT, P_CLOCK, P_THIN, P_VICTIM, P_CLONE, P_INIT = 0, 1, 2, 3, 4, 5


@njit(cache=True, inline="always")
def _pick(weights, u):
    total = 0.0
    for s in range(weights.shape[0]):
        total += weights[s]
    target = u * total
    acc = 0.0
    last = 0
    for s in range(weights.shape[0]):
        if weights[s] > 0.0:
            last = s
            acc += weights[s]
            if target < acc:
                return s
    return last


@njit(cache=True, inline="always")
def _pick_row(matrix, row, u):
    total = 0.0
    for s in range(matrix.shape[1]):
        total += matrix[row, s]
    target = u * total
    acc = 0.0
    last = 0
    for s in range(matrix.shape[1]):
        if matrix[row, s] > 0.0:
            last = s
            acc += matrix[row, s]
            if target < acc:
                return s
    return last


@njit(cache=True)
def _initial_counts(init_cum, N, keys, ctr, buf, pos):
    # Same inversion as the per-particle engine: searchsorted(cum, u * total, "right").
    d = init_cum.shape[0]
    counts = np.zeros(d, dtype=np.int64)
    total = init_cum[d - 1]
    for _ in range(N):
        target = next_double(keys, ctr, buf, pos, P_INIT) * total
        s = 0
        while s < d - 1 and init_cum[s] <= target:
            s += 1
        counts[s] += 1
    return counts


@njit(cache=True)
def _simulate_one(counts, exit_rates, jump_weights, V, centered, kstar, obs_times, horizon,
                  keys, ctr, buf, pos, out):
    d = counts.shape[0]
    N = 0
    for s in range(d):
        N += counts[s]
    K = obs_times.shape[0]
    rates = np.zeros(d)
    weights = np.zeros(d)
    t = 0.0
    k = 0
    events = 0
    sel_rate = N * kstar
    t_sel = np.inf
    if sel_rate > 0.0:
        t_sel = next_exponential(keys, ctr, buf, pos, P_CLOCK, sel_rate)
    t_mut = np.inf
    need_mut = True
    while True:
        if need_mut:
            rm = 0.0
            for s in range(d):
                rm += counts[s] * exit_rates[s]
            t_mut = np.inf
            if rm > 0.0:
                t_mut = t + next_exponential(keys, ctr, buf, pos, P_MUT, rm)
            need_mut = False
        t_next = min(t_mut, t_sel)
        while k < K and obs_times[k] <= t_next:
            for s in range(d):
                out[k, s] = counts[s]
            k += 1
        if t_next > horizon:
            break
        t = t_next
        if t_mut <= t_sel:
            for s in range(d):
                weights[s] = counts[s] * exit_rates[s]
            src = _pick(weights, next_double(keys, ctr, buf, pos, P_MUT))
            dst = _pick_row(jump_weights, src, next_double(keys, ctr, buf, pos, P_MUT))
            counts[src] -= 1
            counts[dst] += 1
            need_mut = True
            continue

        ev = 0.0
        vlo, vhi = np.inf, -np.inf
        for s in range(d):
            if counts[s] > 0:
                ev += counts[s] * V[s]
                vlo = min(vlo, V[s])
                vhi = max(vhi, V[s])
        # Exact mean when every particle sees the same potential value.
        ev = vlo if vlo == vhi else ev / N
        neg_mass = 0.0
        if centered:
            for s in range(d):
                if V[s] < ev:
                    neg_mass += counts[s] * (ev - V[s])
            neg_mass /= N
        total = 0.0
        for s in range(d):
            if centered:
                r = neg_mass
                if V[s] > ev:
                    r += V[s] - ev
            else:
                r = V[s]
            rates[s] = r
            total += counts[s] * r
        if total > sel_rate * (1.0 + 1e-9):
            return events, STATUS_RATE_BOUND
        if next_double(keys, ctr, buf, pos, P_THIN) * sel_rate < total:
            for s in range(d):
                weights[s] = counts[s] * rates[s]
            victim = _pick(weights, next_double(keys, ctr, buf, pos, P_VICTIM))
            uniform_mass = 1.0
            if centered:
                uniform_mass = max(V[victim] - ev, 0.0)
            if (not centered) or next_double(keys, ctr, buf, pos, P_CLONE) * (uniform_mass + neg_mass) < uniform_mass:
                for s in range(d):
                    weights[s] = counts[s]
            else:
                for s in range(d):
                    weights[s] = counts[s] * max(ev - V[s], 0.0)
            source = _pick(weights, next_double(keys, ctr, buf, pos, P_CLONE))
            if source != victim:
                counts[victim] -= 1
                counts[source] += 1
                need_mut = True
            events += 1
        t_sel = t + next_exponential(keys, ctr, buf, pos, P_CLOCK, sel_rate)
    return events, STATUS_OK


@njit(cache=True)
def simulate_batch(replica_keys, N, init_weights, exit_rates, jump_weights, V, centered, kstar,
                   obs_times, horizon):
    """Run one replica per key.

    Returns ``(counts, events, status)`` with ``counts`` of shape
    ``(R, len(obs_times), n_states)``. A nonzero status marks a replica that
    stopped early because the kill rates exceeded ``N * kstar``.
    """
    R = replica_keys.shape[0]
    d = init_weights.shape[0]
    K = obs_times.shape[0]
    out = np.zeros((R, K, d), dtype=np.int64)
    events = np.zeros(R, dtype=np.int64)
    status = np.zeros(R, dtype=np.int64)
    init_cum = np.cumsum(init_weights)
    for r in range(R):
        keys, ctr, buf, pos = new_streams(replica_keys[r], 6)
        counts = _initial_counts(init_cum, N, keys, ctr, buf, pos)
        ev, st = _simulate_one(counts, exit_rates, jump_weights, V, centered, kstar, obs_times,
                               horizon, keys, ctr, buf, pos, out[r])
        events[r] = ev
        status[r] = st
    return out, events, status
