import numpy as np
import pytest
from scipy import stats

import fkparticles.engine as engine
from conftest import TWO_STATE_ETA0, TWO_STATE_F, TWO_STATE_L, taylor_expm, two_state_config
from exact_count_chain import count_law
from fkparticles.dynamics import FiniteChain
from fkparticles.engine import (
    EngineConfig,
    InitialLaw,
    ParticleSystemState,
    init,
    observe,
    run,
    run_counts,
    run_counts_batch,
)
from fkparticles.errors import InvalidInitialLaw, RateBoundViolated
from fkparticles.kernels import KernelVariant, SelectionKernelSpec, kill_rates
from fkparticles.model import GeneratorMatrix, Potential, TestFunction
from fkparticles.oracle import build_oracle, normalized_flow
from fkparticles.rng import Streams, derive_key, replica_keys


def _pooled_chi_square(counts, expected, min_expected=5.0):
    """Chi-square p-value after merging neighbouring bins until each expects >= min_expected."""
    expected = np.asarray(expected) * np.sum(counts) / np.sum(expected)
    obs, exp = [], []
    o_acc = e_acc = 0.0
    for o, e in zip(counts, expected):
        o_acc += o
        e_acc += e
        if e_acc >= min_expected:
            obs.append(o_acc)
            exp.append(e_acc)
            o_acc = e_acc = 0.0
    obs[-1] += o_acc
    exp[-1] += e_acc
    obs, exp = np.array(obs), np.array(exp)
    return stats.chisquare(obs, exp)[1]


def test_init_examples():
    cfg = two_state_config(7)
    pm = EngineConfig(7, 1.0, (), cfg.dynamics, cfg.kernel, cfg.potential, InitialLaw.point_mass(1))
    st = init(pm, 3)
    assert np.all(st.positions == 1) and st.time == 0.0
    big = init(two_state_config(10_000), 4)
    assert abs(np.mean(big.positions == 0) - 0.5) <= 3 * 0.005
    assert init(two_state_config(1), 5).N == 1


def test_invalid_initial_law():
    cfg = two_state_config(3)
    with pytest.raises(InvalidInitialLaw):
        EngineConfig(3, 1.0, (), cfg.dynamics, cfg.kernel, cfg.potential, InitialLaw.categorical([0.3, 0.3]))
    with pytest.raises(InvalidInitialLaw):
        EngineConfig(3, 1.0, (), cfg.dynamics, cfg.kernel, cfg.potential, InitialLaw.gaussian([0.0]))


def test_observe_examples():
    st = ParticleSystemState(positions=np.array([0, 1, 1, 0, 1]))
    assert observe(st, np.ones(2)) == 1.0
    assert observe(st, TWO_STATE_F) == 3 / 5
    assert observe(ParticleSystemState(positions=np.array([1, 1])), [4.0, -2.0]) == -2.0
    assert observe(st, TestFunction.indicator(1, 2)) == 3 / 5


def test_free_system_matches_semigroup():
    cfg = two_state_config(4, V=np.zeros(2), horizon=1.0, obs_times=(1.0,))
    keys = replica_keys(derive_key(99), 10_000)
    counts, events = run_counts_batch(cfg, keys)
    assert np.all(events == 0)
    frac = counts[:, 0, 1].sum() / (4 * len(keys))
    p = (TWO_STATE_ETA0 @ taylor_expm(TWO_STATE_L))[1]
    assert abs(frac - p) <= 3 * np.sqrt(p * (1 - p) / (4 * len(keys)))

    seen = []
    state = run(cfg, Streams.from_key(int(keys[0])), on_event=lambda *a: seen.append(a))
    assert state.event_count == 0 and not seen


def test_free_reference_run_matches_mutation_marginals():
    cfg = two_state_config(3, V=np.zeros(2), horizon=0.7, obs_times=(0.7,))
    ones = 0
    R = 3000
    for r in range(R):
        state = run(cfg, Streams.from_seed(5, r))
        ones += int(state.positions.sum())
    p = (TWO_STATE_ETA0 @ taylor_expm(0.7 * TWO_STATE_L))[1]
    assert abs(ones / (3 * R) - p) <= 3 * np.sqrt(p * (1 - p) / (3 * R))


def test_two_particle_event_formulas():
    rates = kill_rates(KernelVariant.FLEMING_VIOT, np.array([0.0, 1.0]))
    assert rates.sum() / (2 * 1.0) == 0.5
    assert rates[1] / rates.sum() == 1.0


def test_two_particle_first_event(monkeypatch):
    """Particles at (0, 1), frozen chain: accept w.p. 1/2, victim always the state-1 particle."""
    cfg = EngineConfig(
        N=2,
        horizon=1.0,
        obs_times=(),
        dynamics=FiniteChain(GeneratorMatrix(np.zeros((2, 2)))),
        kernel=KernelVariant.FLEMING_VIOT,
        potential=Potential.table([0.0, 1.0]),
        initial_law=InitialLaw.categorical([0.5, 0.5]),
    )
    real_init = engine.init

    def pinned(config, rng):
        st = real_init(config, rng)
        st.positions = np.array([0, 1])
        return st

    monkeypatch.setattr(engine, "init", pinned)
    accepted, R = 0, 10_000
    for r in range(R):
        streams = Streams.from_seed(17, r)
        first = -np.log1p(-Streams.from_seed(17, r).clock.random()) / 2.0
        victims = []
        one_shot = EngineConfig(2, first + 1e-12, (), cfg.dynamics, cfg.kernel, cfg.potential, cfg.initial_law)
        state = run(one_shot, streams, on_event=lambda t, v, s: victims.append(v))
        assert state.proposal_count == 1
        accepted += state.event_count
        assert victims in ([], [1])
    assert abs(accepted / R - 0.5) <= 3 * 0.5 / np.sqrt(R)


def test_population_and_time_invariants():
    cfg = two_state_config(12, horizon=3.0, obs_times=(0.5, 1.0, 3.0))
    times = []
    state = run(cfg, 8, on_observe=lambda t, eta: times.append((t, eta.N)), on_event=lambda t, v, s: times.append((t, 12)))
    assert all(n == 12 for _, n in times)
    assert state.N == 12 and state.time == 3.0
    obs = [t for t, _ in times]
    assert obs == sorted(obs)


def test_accepted_events_are_poisson_under_constant_potential():
    N, c = 10, 1.0
    spec = SelectionKernelSpec(KernelVariant.FLEMING_VIOT, rate_bound=2 * c)
    cfg = EngineConfig(
        N=N,
        horizon=1000.0,
        obs_times=(),
        dynamics=FiniteChain(GeneratorMatrix(TWO_STATE_L)),
        kernel=spec,
        potential=Potential.table([c, c]),
        initial_law=InitialLaw.categorical([0.5, 0.5]),
    )
    times = []
    state = run(cfg, 21, on_event=lambda t, v, s: times.append(t))
    assert len(times) > 9000
    gaps = np.diff(np.concatenate([[0.0], times]))
    assert stats.kstest(gaps, "expon", args=(0, 1 / (N * c))).pvalue > 1e-3
    # Acceptance is exactly c / K* = 1/2 at every proposal.
    p = state.event_count / state.proposal_count
    assert abs(p - 0.5) <= 4 * 0.5 / np.sqrt(state.proposal_count)


def test_mean_event_count_below_clock_budget():
    cfg = two_state_config(64, horizon=5.0, obs_times=(5.0,))
    _, events = run_counts_batch(cfg, replica_keys(derive_key(4), 2000))
    assert events.mean() <= 64 * 1.0 * 5.0


def test_rate_bound_violation_is_fatal():
    cfg = two_state_config(8)
    bad = EngineConfig(
        N=8,
        horizon=2.0,
        obs_times=(),
        dynamics=cfg.dynamics,
        kernel=SelectionKernelSpec(KernelVariant.FLEMING_VIOT, rate_bound=1.0),
        potential=Potential.table([0.0, 1.0], sup_bound=1.0),
        initial_law=cfg.initial_law,
    )
    run(bad, 1)  # consistent pair runs fine
    with pytest.raises(ValueError):
        EngineConfig(8, 2.0, (), cfg.dynamics, SelectionKernelSpec(KernelVariant.FLEMING_VIOT, 0.5), cfg.potential, cfg.initial_law)
    # Sneak an inconsistent bound past validation to reach the runtime guard.
    object.__setattr__(bad, "kernel", SelectionKernelSpec(KernelVariant.FLEMING_VIOT, rate_bound=0.5))
    with pytest.raises(RateBoundViolated):
        run(bad, 1)
    with pytest.raises(RateBoundViolated):
        run_counts_batch(bad, replica_keys(derive_key(1), 4))


@pytest.mark.parametrize("kernel", ["fleming_viot", "centered"])
def test_compiled_engine_matches_exact_count_law(kernel):
    N, t = 16, 2.0
    cfg = two_state_config(N, kernel=kernel, horizon=t, obs_times=(t,))
    counts, _ = run_counts_batch(cfg, replica_keys(derive_key(31, N), 20_000))
    hist = np.bincount(counts[:, 0, 1], minlength=N + 1)
    assert _pooled_chi_square(hist, count_law(N, t)) > 1e-3


@pytest.mark.parametrize("kernel", ["fleming_viot", "centered"])
def test_reference_engine_matches_exact_count_law(kernel):
    N, t = 8, 1.5
    cfg = two_state_config(N, kernel=kernel, horizon=t, obs_times=(t,))
    R = 3000
    ks = np.array([int(run(cfg, Streams.from_seed(77, r)).positions.sum()) for r in range(R)])
    assert _pooled_chi_square(np.bincount(ks, minlength=N + 1), count_law(N, t)) > 1e-3


def test_compiled_and_reference_share_initial_draw():
    cfg = two_state_config(50, horizon=1.0, obs_times=(0.0,))
    keys = replica_keys(derive_key(3), 20)
    counts, _ = run_counts_batch(cfg, keys)
    for r, key in enumerate(keys):
        st = init(cfg, Streams.from_key(int(key)))
        assert np.array_equal(np.bincount(st.positions, minlength=2), counts[r, 0])


def test_mean_matches_oracle_at_n512():
    N, t = 512, 5.0
    cfg = two_state_config(N, horizon=t, obs_times=(t,))
    counts, _ = run_counts_batch(cfg, replica_keys(derive_key(2, N), 2000))
    vals = counts[:, 0, 1] / N
    target = normalized_flow(build_oracle(TWO_STATE_L, [0.0, 1.0]), TWO_STATE_ETA0, t, TWO_STATE_F)
    assert abs(vals.mean() - target) <= 3 * vals.std(ddof=1) / np.sqrt(len(vals))


def test_exchangeability_under_initial_permutation(monkeypatch):
    cfg = two_state_config(5, horizon=1.0, obs_times=(1.0,))
    real_init = engine.init
    finals = {}
    for label, start in (("sorted", [0, 0, 0, 1, 1]), ("shuffled", [1, 0, 1, 0, 0])):

        def pinned(config, rng, start=start):
            st = real_init(config, rng)
            st.positions = np.array(start)
            return st

        monkeypatch.setattr(engine, "init", pinned)
        finals[label] = np.bincount([int(run(cfg, Streams.from_seed(9, r)).positions.sum()) for r in range(2000)], minlength=6)
    table = np.array([finals["sorted"], finals["shuffled"]])
    table = table[:, table.sum(axis=0) > 0]
    assert stats.chi2_contingency(table)[1] > 1e-3


def test_determinism():
    cfg = two_state_config(20, kernel="centered", horizon=2.0, obs_times=(1.0, 2.0))
    a, b = [], []
    sa = run(cfg, 123, on_observe=lambda t, eta: a.append(eta.positions.copy()))
    sb = run(cfg, 123, on_observe=lambda t, eta: b.append(eta.positions.copy()))
    assert sa.event_count == sb.event_count and all(np.array_equal(x, y) for x, y in zip(a, b))
    c1, e1 = run_counts(cfg, 123)
    c2, e2 = run_counts(cfg, 123)
    assert np.array_equal(c1, c2) and e1 == e2


def test_diffusion_run_observes_exact_times():
    from fkparticles.dynamics import Diffusion, DriftSpec

    cfg = EngineConfig(
        N=6,
        horizon=0.5,
        obs_times=(0.0, 0.25, 0.5),
        dynamics=Diffusion(DriftSpec.custom("neg_cubic"), dim=1, step=0.01),
        kernel=KernelVariant.CENTERED,
        potential=Potential.function(lambda x: np.tanh(x[..., 0]) ** 2, 1.0),
        initial_law=InitialLaw.gaussian([0.0], 0.5),
    )
    seen = []
    state = run(cfg, 4, on_observe=lambda t, eta: seen.append((t, eta.positions.shape)))
    assert [t for t, _ in seen] == [0.0, 0.25, 0.5]
    assert all(shape == (6, 1) for _, shape in seen)
    assert state.positions.shape == (6, 1)
