"""Scenario files: parsing, validation, canonical serialization and fingerprints.

A scenario is a JSON object. Validation collects every violation before
failing, and each one names the offending field path.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .dynamics import CUSTOM_DRIFTS, H_BUILTINS, Diffusion, DriftSpec, FiniteChain, eigen_potential_from_h
from .engine import EngineConfig, InitialLaw
from .errors import ConfigSyntaxError, ConfigValidationError, FKError
from .kernels import KernelVariant
from .model import Potential, TestFunction, check_generator

# Fields that change how much is run or where it is written, not what is run.
NON_FINGERPRINT_FIELDS = ("replicas", "base_seed", "outputs")

ASSERTION_STATISTICS = ("l2_slope", "l2_r_squared", "bias_slope", "bias_r_squared")
DIFFUSION_POTENTIALS = ("eigen_from_h", "constant", "gaussian_well")
DIFFUSION_TEST_FUNCTIONS = ("tanh", "gaussian_bump")

DEFAULTS = {
    "kernel": "fleming_viot",
    "replicas": 1000,
    "base_seed": 0,
    "outputs": "results",
    "assertions": [],
}
DEFAULT_STEP = 1e-2


@dataclass(frozen=True)
class ScenarioConfig:
    """Validated scenario with every default filled in.

    The nested fields stay in their JSON form so the config round-trips
    through ``serialize`` unchanged. ``engine_config(N)`` builds the objects.
    """

    name: str
    dynamics: dict
    potential: dict
    kernel: str
    test_function: dict
    initial_law: dict
    n_grid: tuple[int, ...]
    horizon: float
    obs_times: tuple[float, ...]
    replicas: int
    base_seed: int
    outputs: str
    assertions: tuple[dict, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dynamics": copy.deepcopy(self.dynamics),
            "potential": copy.deepcopy(self.potential),
            "kernel": self.kernel,
            "test_function": copy.deepcopy(self.test_function),
            "initial_law": copy.deepcopy(self.initial_law),
            "n_grid": list(self.n_grid),
            "horizon": self.horizon,
            "obs_times": list(self.obs_times),
            "replicas": self.replicas,
            "base_seed": self.base_seed,
            "outputs": self.outputs,
            "assertions": [dict(a) for a in self.assertions],
        }

    @property
    def is_finite(self) -> bool:
        return self.dynamics["type"] == "finite_chain"

    @property
    def fingerprint(self) -> str:
        return fingerprint(self)

    def build_dynamics(self):
        return _build_dynamics(self.dynamics)

    def build_potential(self) -> Potential:
        return _build_potential(self.potential, self.dynamics)

    def build_test_function(self) -> TestFunction:
        return _build_test_function(self.test_function, self.dynamics)

    def build_initial_law(self) -> InitialLaw:
        return _build_initial_law(self.initial_law)

    def engine_config(self, N: int) -> EngineConfig:
        return EngineConfig(
            N=int(N),
            horizon=self.horizon,
            obs_times=self.obs_times,
            dynamics=self.build_dynamics(),
            kernel=KernelVariant(self.kernel),
            potential=self.build_potential(),
            initial_law=self.build_initial_law(),
        )


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def fingerprint(config: ScenarioConfig) -> str:
    """Git blob SHA-1 of the canonical JSON, ignoring run-size and output fields."""
    data = config.to_dict()
    for key in NON_FINGERPRINT_FIELDS:
        data.pop(key, None)
    body = canonical_json(data).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def serialize(config: ScenarioConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"


def load_config(path) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def parse_config(text: str) -> ScenarioConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigSyntaxError(exc.msg, exc.lineno, exc.colno) from None
    return validate_config(raw)


# -- validation ---------------------------------------------------------------------------


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and np.isfinite(x)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


class _Collector:
    def __init__(self):
        self.violations: list[tuple[str, str]] = []

    def add(self, path: str, msg: str) -> None:
        self.violations.append((path, msg))

    def number(self, data: dict, key: str, path: str, required: bool = True):
        if key not in data:
            if required:
                self.add(path, "required field is missing")
            return None
        if not _is_number(data[key]):
            self.add(path, "must be a finite number")
            return None
        return float(data[key])

    def number_list(self, value, path: str):
        if not isinstance(value, list) or not value or not all(_is_number(v) for v in value):
            self.add(path, "must be a non-empty list of finite numbers")
            return None
        return [float(v) for v in value]


def _check_dynamics(raw, c: _Collector) -> dict | None:
    if not isinstance(raw, dict):
        c.add("dynamics", "must be an object")
        return None
    kind = raw.get("type")
    if kind == "finite_chain":
        rates = raw.get("rates")
        ok = (
            isinstance(rates, list)
            and len(rates) >= 2
            and all(isinstance(r, list) and len(r) == len(rates) and all(_is_number(v) for v in r) for r in rates)
        )
        if not ok:
            c.add("dynamics.rates", "must be a square matrix (at least 2x2) of finite numbers")
            return None
        try:
            check_generator(np.asarray(rates, dtype=float))
        except FKError as exc:
            c.add("dynamics.rates", f"not a generator: {exc}")
            return None
        if "step" in raw:
            c.add("dynamics.step", "only diffusions take an integration step")
        return {"type": "finite_chain", "rates": [[float(v) for v in r] for r in rates]}
    if kind == "diffusion":
        out: dict = {"type": "diffusion"}
        dim = raw.get("dim", 1)
        if not _is_int(dim) or dim < 1:
            c.add("dynamics.dim", "must be a positive integer")
            dim = 1
        out["dim"] = dim
        step = raw.get("step", DEFAULT_STEP)
        if not _is_number(step) or not 0 < step <= 0.1:
            c.add("dynamics.step", "must lie in (0, 0.1]")
        else:
            out["step"] = float(step)
        drift = raw.get("drift")
        if not isinstance(drift, dict):
            c.add("dynamics.drift", "must be an object")
            return None
        form = drift.get("form")
        if form == "polynomial":
            coeffs = drift.get("coefficients")
            good = isinstance(coeffs, list) and coeffs and all(
                isinstance(r, list) and r and all(_is_number(v) for v in r) for r in coeffs
            )
            if not good or len(coeffs) not in (1, dim):
                c.add("dynamics.drift.coefficients", "must be one or dim lists of ascending coefficients")
                return None
            out["drift"] = {"form": "polynomial", "coefficients": [[float(v) for v in r] for r in coeffs]}
        elif form == "ou":
            mu = c.number(drift, "mu", "dynamics.drift.mu", required=False)
            out["drift"] = {"form": "ou", "mu": 1.0 if mu is None else mu}
        elif form == "custom":
            name = drift.get("name")
            if name not in CUSTOM_DRIFTS:
                c.add("dynamics.drift.name", f"unknown builtin drift; choose from {sorted(CUSTOM_DRIFTS)}")
                return None
            out["drift"] = {"form": "custom", "name": name}
        else:
            c.add("dynamics.drift.form", "must be 'polynomial', 'ou' or 'custom'")
            return None
        return out if "step" in out else None
    c.add("dynamics.type", "must be 'finite_chain' or 'diffusion'")
    return None


def _check_potential(raw, dyn: dict | None, kernel, c: _Collector) -> dict | None:
    if not isinstance(raw, dict):
        c.add("potential", "must be an object")
        return None
    if "table" in raw:
        vals = c.number_list(raw["table"], "potential.table")
        if vals is None:
            return None
        if dyn is not None and dyn["type"] != "finite_chain":
            c.add("potential.table", "tabulated potentials need a finite chain")
            return None
        if dyn is not None and len(vals) != len(dyn["rates"]):
            c.add("potential.table", f"has {len(vals)} entries for {len(dyn['rates'])} states")
            return None
        if kernel == "fleming_viot" and min(vals) < 0:
            c.add("potential.table", "the fleming_viot kernel requires a nonnegative potential")
        return {"table": vals}
    name = raw.get("builtin")
    if name not in DIFFUSION_POTENTIALS:
        c.add("potential", f"needs 'table' or a 'builtin' from {list(DIFFUSION_POTENTIALS)}")
        return None
    if dyn is not None and dyn["type"] != "diffusion":
        c.add("potential.builtin", "closed-form potentials need a diffusion")
        return None
    out: dict = {"builtin": name}
    if name == "eigen_from_h":
        h = raw.get("h")
        if h not in H_BUILTINS:
            c.add("potential.h", f"unknown h builtin; choose from {sorted(H_BUILTINS)}")
            return None
        out["h"] = h
    elif name == "constant":
        v = c.number(raw, "value", "potential.value")
        if v is None:
            return None
        out["value"] = v
    else:
        v = c.number(raw, "scale", "potential.scale", required=False)
        out["scale"] = 1.0 if v is None else v
    if dyn is not None:
        try:
            V = _build_potential(out, dyn)
        except FKError as exc:
            c.add("potential", str(exc))
            return None
        if kernel == "fleming_viot" and _probe_min(V, dyn["dim"]) < 0:
            c.add("potential", "the fleming_viot kernel requires a nonnegative potential")
    return out


def _probe_min(V: Potential, dim: int) -> float:
    grid = np.linspace(-60, 60, 4801)
    pts = np.zeros((grid.size, dim))
    pts[:, 0] = grid
    return float(np.min(V(pts)))


def _check_test_function(raw, dyn: dict | None, c: _Collector) -> dict | None:
    if not isinstance(raw, dict):
        c.add("test_function", "must be an object")
        return None
    finite = dyn is not None and dyn["type"] == "finite_chain"
    size = len(dyn["rates"]) if finite else None
    if "table" in raw:
        vals = c.number_list(raw["table"], "test_function.table")
        if vals is None:
            return None
        if dyn is not None and not finite:
            c.add("test_function.table", "tabulated test functions need a finite chain")
        elif size is not None and len(vals) != size:
            c.add("test_function.table", f"has {len(vals)} entries for {size} states")
        return {"table": vals}
    name = raw.get("builtin")
    if name == "indicator":
        state = raw.get("state")
        if not _is_int(state) or (size is not None and not 0 <= state < size):
            c.add("test_function.state", "must be a valid state index")
            return None
        if dyn is not None and not finite:
            c.add("test_function.builtin", "indicator needs a finite chain")
        return {"builtin": "indicator", "state": state}
    if name in DIFFUSION_TEST_FUNCTIONS:
        if finite:
            c.add("test_function.builtin", f"{name} needs a diffusion")
        return {"builtin": name}
    c.add("test_function", "needs 'table' or a known 'builtin'")
    return None


def _check_initial_law(raw, dyn: dict | None, c: _Collector) -> dict | None:
    finite = dyn is not None and dyn["type"] == "finite_chain"
    if raw is None:
        if dyn is None:
            return None
        if finite:
            d = len(dyn["rates"])
            return {"categorical": [1.0 / d] * d}
        return {"point": [0.0] * dyn["dim"]}
    if not isinstance(raw, dict) or len(raw) != 1:
        c.add("initial_law", "must be an object with exactly one of categorical / point / gaussian")
        return None
    if "categorical" in raw:
        w = c.number_list(raw["categorical"], "initial_law.categorical")
        if w is None:
            return None
        if dyn is not None and not finite:
            c.add("initial_law.categorical", "needs a finite chain")
        elif finite and len(w) != len(dyn["rates"]):
            c.add("initial_law.categorical", "length must equal the number of states")
        elif min(w) < 0 or abs(sum(w) - 1) > 1e-12:
            c.add("initial_law.categorical", "must be a probability vector")
        return {"categorical": w}
    if "point" in raw:
        p = raw["point"]
        if finite:
            if not _is_int(p) or not 0 <= p < len(dyn["rates"]):
                c.add("initial_law.point", "must be a valid state index")
                return None
            return {"point": p}
        pts = c.number_list(p, "initial_law.point")
        if pts is None:
            return None
        if dyn is not None and len(pts) != dyn["dim"]:
            c.add("initial_law.point", "length must equal the dimension")
        return {"point": pts}
    if "gaussian" in raw:
        g = raw["gaussian"]
        if finite:
            c.add("initial_law.gaussian", "needs a diffusion")
            return None
        if not isinstance(g, dict):
            c.add("initial_law.gaussian", "must be an object with mean and std")
            return None
        mean = c.number_list(g.get("mean"), "initial_law.gaussian.mean")
        std = c.number(g, "std", "initial_law.gaussian.std", required=False)
        std = 1.0 if std is None else std
        if std < 0:
            c.add("initial_law.gaussian.std", "must be non-negative")
        if mean is None:
            return None
        if dyn is not None and len(mean) != dyn["dim"]:
            c.add("initial_law.gaussian.mean", "length must equal the dimension")
        return {"gaussian": {"mean": mean, "std": std}}
    c.add("initial_law", "must be one of categorical / point / gaussian")
    return None


def _check_assertions(raw, obs_times, c: _Collector) -> list[dict]:
    if not isinstance(raw, list):
        c.add("assertions", "must be a list")
        return []
    out = []
    for i, a in enumerate(raw):
        path = f"assertions[{i}]"
        if not isinstance(a, dict):
            c.add(path, "must be an object")
            continue
        stat = a.get("statistic")
        if stat not in ASSERTION_STATISTICS:
            c.add(f"{path}.statistic", f"must be one of {list(ASSERTION_STATISTICS)}")
            continue
        t = c.number(a, "time", f"{path}.time")
        if t is not None and obs_times is not None and t not in obs_times:
            c.add(f"{path}.time", "must be one of obs_times")
        entry = {"statistic": stat, "time": t}
        for bound in ("min", "max"):
            if bound in a:
                v = c.number(a, bound, f"{path}.{bound}")
                if v is not None:
                    entry[bound] = v
        if "min" not in entry and "max" not in entry:
            c.add(path, "needs at least one of min / max")
        out.append(entry)
    return out


def validate_config(raw) -> ScenarioConfig:
    c = _Collector()
    if not isinstance(raw, dict):
        raise ConfigValidationError([("", "top level must be an object")])
    known = {"name", "dynamics", "potential", "kernel", "test_function", "initial_law", "n_grid",
             "horizon", "obs_times", "replicas", "base_seed", "outputs", "assertions"}
    for key in sorted(set(raw) - known):
        c.add(key, "unknown field")

    name = raw.get("name")
    if not isinstance(name, str) or not name:
        c.add("name", "must be a non-empty string")

    kernel = raw.get("kernel", DEFAULTS["kernel"])
    if kernel not in [k.value for k in KernelVariant]:
        c.add("kernel", "must be 'fleming_viot' or 'centered'")
        kernel = None

    dyn = _check_dynamics(raw.get("dynamics"), c)
    pot = _check_potential(raw.get("potential"), dyn, kernel, c)
    tf = _check_test_function(raw.get("test_function"), dyn, c)
    law = _check_initial_law(raw.get("initial_law"), dyn, c)

    n_grid = raw.get("n_grid")
    if not isinstance(n_grid, list) or not n_grid or not all(_is_int(n) and n >= 1 for n in n_grid):
        c.add("n_grid", "must be a non-empty list of positive integers")
        n_grid = None
    elif len(set(n_grid)) != len(n_grid):
        c.add("n_grid", "values must be distinct")

    horizon = c.number(raw, "horizon", "horizon")
    if horizon is not None and horizon <= 0:
        c.add("horizon", "must be positive")
    obs = raw.get("obs_times", [horizon] if horizon is not None else None)
    obs_times = None
    if obs is not None:
        obs_times = c.number_list(obs, "obs_times")
        if obs_times is not None:
            if any(b < a for a, b in zip(obs_times, obs_times[1:])):
                c.add("obs_times", "must be sorted")
            for i, t in enumerate(obs_times):
                if t < 0:
                    c.add(f"obs_times[{i}]", "must be non-negative")
                if horizon is not None and t > horizon:
                    c.add(f"obs_times[{i}]", f"{t} exceeds the horizon {horizon}")

    replicas = raw.get("replicas", DEFAULTS["replicas"])
    if not _is_int(replicas) or replicas < 1:
        c.add("replicas", "must be a positive integer")
    base_seed = raw.get("base_seed", DEFAULTS["base_seed"])
    if not _is_int(base_seed) or not 0 <= base_seed < 2**64:
        c.add("base_seed", "must be an integer in [0, 2**64)")
    outputs = raw.get("outputs", DEFAULTS["outputs"])
    if not isinstance(outputs, str) or not outputs:
        c.add("outputs", "must be a non-empty path string")
    assertions = _check_assertions(raw.get("assertions", DEFAULTS["assertions"]), obs_times, c)

    if c.violations:
        raise ConfigValidationError(c.violations)
    return ScenarioConfig(
        name=name,
        dynamics=dyn,
        potential=pot,
        kernel=kernel,
        test_function=tf,
        initial_law=law,
        n_grid=tuple(n_grid),
        horizon=horizon,
        obs_times=tuple(obs_times),
        replicas=replicas,
        base_seed=base_seed,
        outputs=outputs,
        assertions=tuple(assertions),
    )


# -- object construction ------------------------------------------------------------------


def _build_drift(d: dict) -> DriftSpec:
    if d["form"] == "polynomial":
        return DriftSpec.polynomial(*d["coefficients"])
    if d["form"] == "ou":
        return DriftSpec.ornstein_uhlenbeck(d["mu"])
    return DriftSpec.custom(d["name"])


def _build_dynamics(d: dict):
    if d["type"] == "finite_chain":
        return FiniteChain(np.asarray(d["rates"], dtype=float))
    return Diffusion(_build_drift(d["drift"]), dim=d["dim"], step=d["step"])


class _GaussianWell:
    def __init__(self, scale: float):
        self.scale = scale

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.scale * (1.0 - np.exp(-np.sum(x**2, axis=-1)))


class _Constant:
    def __init__(self, value: float):
        self.value = value

    def __call__(self, x):
        return np.full(np.asarray(x).shape[:-1], self.value)


def _build_potential(p: dict, dyn: dict) -> Potential:
    if "table" in p:
        return Potential.table(p["table"])
    if p["builtin"] == "eigen_from_h":
        return eigen_potential_from_h(p["h"], _build_drift(dyn["drift"]))
    if p["builtin"] == "constant":
        return Potential.function(_Constant(p["value"]), abs(p["value"]), name="constant", constant=p["value"])
    return Potential.function(_GaussianWell(p["scale"]), abs(p["scale"]), name="gaussian_well")


def _tanh_first(x):
    return np.tanh(np.asarray(x, dtype=float)[..., 0])


def _gaussian_bump(x):
    return np.exp(-np.sum(np.asarray(x, dtype=float) ** 2, axis=-1))


def _build_test_function(t: dict, dyn: dict) -> TestFunction:
    if "table" in t:
        return TestFunction.table(t["table"])
    if t["builtin"] == "indicator":
        return TestFunction.indicator(t["state"], len(dyn["rates"]))
    if t["builtin"] == "tanh":
        return TestFunction.function(_tanh_first, 1.0, lipschitz=1.0, name="tanh")
    return TestFunction.function(_gaussian_bump, 1.0, lipschitz=float(np.sqrt(2 / np.e)), name="gaussian_bump")


def _build_initial_law(law: dict) -> InitialLaw:
    if "categorical" in law:
        return InitialLaw.categorical(law["categorical"])
    if "point" in law:
        return InitialLaw.point_mass(law["point"])
    g = law["gaussian"]
    return InitialLaw.gaussian(g["mean"], g["std"])
