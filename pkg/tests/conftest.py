import sys
from pathlib import Path

import numpy as np
import pytest

from fkparticles.dynamics import FiniteChain
from fkparticles.engine import EngineConfig, InitialLaw
from fkparticles.kernels import KernelVariant
from fkparticles.model import GeneratorMatrix, Potential, TestFunction

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "scripts"))

TWO_STATE_L = np.array([[-1.0, 1.0], [1.0, -1.0]])
TWO_STATE_V = np.array([0.0, 1.0])
TWO_STATE_F = np.array([0.0, 1.0])
TWO_STATE_ETA0 = np.array([0.5, 0.5])


def taylor_expm(A, tol=1e-16):
    """Scaling and squaring around a plain Taylor series; independent of scipy."""
    A = np.asarray(A, dtype=float)
    norm = np.abs(A).sum(axis=1).max()
    s = max(0, int(np.ceil(np.log2(norm))) + 1) if norm > 0 else 0
    B = A / 2.0**s
    term = np.eye(len(A))
    out = term.copy()
    for k in range(1, 60):
        term = term @ B / k
        out = out + term
        if np.abs(term).max() < tol:
            break
    for _ in range(s):
        out = out @ out
    return out


def random_generator(rng, d, scale=2.0):
    off = rng.uniform(0, scale, (d, d))
    np.fill_diagonal(off, 0.0)
    return off - np.diag(off.sum(axis=1))


def two_state_config(N, kernel="fleming_viot", horizon=5.0, obs_times=(5.0,), V=TWO_STATE_V, eta0=TWO_STATE_ETA0):
    return EngineConfig(
        N=N,
        horizon=horizon,
        obs_times=tuple(obs_times),
        dynamics=FiniteChain(GeneratorMatrix(TWO_STATE_L)),
        kernel=KernelVariant(kernel),
        potential=Potential.table(V),
        initial_law=InitialLaw.categorical(eta0),
    )


@pytest.fixture
def indicator_one():
    return TestFunction.indicator(1, 2)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, status: str, detail: str) -> None:
    line = f"criterion {number:>2}: {status:<9} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
