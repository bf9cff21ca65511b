"""Run a 2-state scenario and set the simulated errors beside the exact count-chain values.

    python scripts/run_rates.py scenarios/twostate_rates.json --replicas 4000
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

from exact_count_chain import error_moments  # noqa: E402
from fkparticles.config import load_config  # noqa: E402
from fkparticles.estimators import moment_errors  # noqa: E402
from fkparticles.experiment import run_experiment  # noqa: E402


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--replicas", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="results")
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args(argv)

    cfg = load_config(args.config)
    res = run_experiment(cfg, replicas=args.replicas, seed=args.seed, out=args.out, workers=args.workers)
    print(f"{'N':>5} {'t':>5} {'bias':>11} {'exact bias':>11} {'L2':>9} {'exact L2':>9}")
    for N, batch in sorted(res.batches.items()):
        m = moment_errors(batch, 2)
        for k, t in enumerate(batch.times):
            ex = error_moments(N, float(t))
            print(f"{N:>5} {t:>5g} {m.bias[k]:>11.3e} {ex['bias']:>11.3e} {m.lp[k]:>9.5f} {ex['l2']:>9.5f}")
    for t, fits in res.summary["rate_fits"].items():
        l2 = fits.get("l2", {})
        if "slope" in l2:
            print(f"t={t}: L2 slope {l2['slope']:.3f} (r^2 {l2['r_squared']:.4f})")
    for a in res.summary["assertions"]:
        print(f"assertion {a['statistic']} at t={a['time']}: {'pass' if a['passed'] else 'FAIL'} ({a['value']})")
    return 0 if res.all_passed else 1


if __name__ == "__main__":
    sys.exit(main())
