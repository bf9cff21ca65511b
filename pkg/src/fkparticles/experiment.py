"""Run a scenario over its N grid and write the result table plus a summary."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ScenarioConfig
from .errors import FKError, NonpositiveError
from .estimators import MIN_REPLICAS, ReplicaBatch, fit_rate, moment_errors, run_replicas

CSV_COLUMNS = ("scenario", "N", "time", "statistic", "value", "stderr", "replicas", "seed", "fingerprint")


@dataclass
class ExperimentResult:
    rows: list[tuple]
    summary: dict
    batches: dict[int, ReplicaBatch] = field(default_factory=dict)
    csv_path: Path | None = None
    summary_path: Path | None = None

    @property
    def all_passed(self) -> bool:
        return bool(self.summary["all_passed"])


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def seed_tag(fp: str) -> int:
    return int(fp[:15], 16)


def _summary_rows(cfg: ScenarioConfig, fp: str, batch: ReplicaBatch) -> list[tuple]:
    rows = []
    R = batch.R
    mean = batch.values.mean(axis=0)
    sd = batch.values.std(axis=0, ddof=1) if R > 1 else np.full(mean.shape, np.nan)
    if batch.oracle is not None and R >= MIN_REPLICAS:
        m = moment_errors(batch, 2)
        bias, bias_se, l2, l2_se = m.bias, m.bias_se, m.lp, m.lp_se
    elif batch.oracle is not None:
        err = batch.values - batch.oracle
        bias, l2 = err.mean(axis=0), np.sqrt(np.mean(err**2, axis=0))
        bias_se = l2_se = np.full(mean.shape, np.nan)
    for k, t in enumerate(batch.times):
        stats = [("mean", mean[k], sd[k] / math.sqrt(R))]
        if batch.oracle is not None:
            stats += [("oracle", batch.oracle[k], 0.0), ("bias", bias[k], bias_se[k]), ("l2_error", l2[k], l2_se[k])]
        for name, val, se in stats:
            rows.append((cfg.name, batch.N, t, name, val, se, R, cfg.base_seed, fp))
    ev = batch.event_counts.astype(float)
    se = ev.std(ddof=1) / math.sqrt(R) if R > 1 else math.nan
    rows.append((cfg.name, batch.N, cfg.horizon, "killings", ev.mean(), se, R, cfg.base_seed, fp))
    return rows


def _rate_fits(batches: dict[int, ReplicaBatch]) -> dict:
    fits: dict = {}
    usable = {N: b for N, b in sorted(batches.items()) if b.oracle is not None and b.R >= MIN_REPLICAS}
    if len(usable) < 3:
        return fits
    moments = {N: moment_errors(b, 2) for N, b in usable.items()}
    times = next(iter(usable.values())).times
    for k, t in enumerate(times):
        entry = {}
        for label, getter in (("l2", lambda m: m.lp[k]), ("bias", lambda m: abs(m.bias[k]))):
            try:
                fit = fit_rate([(N, getter(m)) for N, m in moments.items()])
            except NonpositiveError as exc:
                entry[label] = {"error": str(exc)}
                continue
            entry[label] = {
                "slope": fit.slope,
                "intercept": fit.intercept,
                "r_squared": fit.r_squared,
                "slope_stderr": fit.slope_stderr,
                "n_grid": list(fit.n_grid),
            }
        fits[repr(float(t))] = entry
    return fits


def _evaluate_assertions(cfg: ScenarioConfig, fits: dict) -> list[dict]:
    out = []
    for a in cfg.assertions:
        kind, _, quantity = a["statistic"].partition("_")
        key = "slope" if quantity == "slope" else "r_squared"
        fit = fits.get(repr(float(a["time"])), {}).get(kind, {})
        value = fit.get(key)
        result = dict(a, value=value)
        if value is None:
            result.update(passed=False, reason=fit.get("error", "rate fit unavailable (needs 3 successful N values with an oracle)"))
        else:
            result["passed"] = bool(a.get("min", -math.inf) <= value <= a.get("max", math.inf))
        out.append(result)
    return out


def run_experiment(
    cfg: ScenarioConfig,
    replicas: int | None = None,
    seed: int | None = None,
    out: str | Path | None = None,
    workers: int = 1,
    write: bool = True,
) -> ExperimentResult:
    """Simulate every N of the grid, then write ``<name>.csv`` and ``<name>.summary.json``.

    A failure at one N is recorded in the summary and the other N values still run.
    """
    if replicas is not None or seed is not None or out is not None:
        from dataclasses import replace

        cfg = replace(
            cfg,
            replicas=cfg.replicas if replicas is None else int(replicas),
            base_seed=cfg.base_seed if seed is None else int(seed),
            outputs=cfg.outputs if out is None else str(out),
        )
    fp = cfg.fingerprint
    f = cfg.build_test_function()
    rows: list[tuple] = []
    batches: dict[int, ReplicaBatch] = {}
    errors: dict[str, str] = {}
    for N in cfg.n_grid:
        try:
            batch = run_replicas(
                cfg.engine_config(N), cfg.replicas, cfg.base_seed, f, tag=seed_tag(fp), workers=workers, fingerprint=fp
            )
        except FKError as exc:
            errors[str(N)] = f"{type(exc).__name__}: {exc}"
            continue
        batches[N] = batch
        for r in range(batch.R):
            for k, t in enumerate(batch.times):
                rows.append((cfg.name, N, t, "observation", batch.values[r, k], None, 1, int(batch.keys[r]), fp))
        rows.extend(_summary_rows(cfg, fp, batch))

    fits = _rate_fits(batches)
    assertions = _evaluate_assertions(cfg, fits)
    summary = {
        "scenario": cfg.name,
        "fingerprint": fp,
        "base_seed": cfg.base_seed,
        "replicas": cfg.replicas,
        "n_grid": list(cfg.n_grid),
        "completed_n": sorted(batches),
        "errors": errors,
        "rate_fits": fits,
        "assertions": assertions,
        "all_passed": all(a["passed"] for a in assertions),
    }
    result = ExperimentResult(rows=rows, summary=summary, batches=batches)
    if write:
        outdir = Path(cfg.outputs)
        outdir.mkdir(parents=True, exist_ok=True)
        result.csv_path = outdir / f"{cfg.name}.csv"
        result.summary_path = outdir / f"{cfg.name}.summary.json"
        result.csv_path.write_text(format_csv(rows), encoding="utf-8")
        result.summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return result


def format_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in rows:
        scenario, N, t, stat, value, se, reps, seed, fp = row
        w.writerow([scenario, _fmt(N), _fmt(t), stat, _fmt(value), _fmt(se), _fmt(reps), _fmt(seed), fp])
    return buf.getvalue()
