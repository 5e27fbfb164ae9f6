"""Shape estimation: active coverage against the equilibrium-only baseline over seeds 0..9.

    python scripts/run_shape.py [--seeds 0..9] [--out out/shape]
"""
import argparse
import sys
from pathlib import Path

import numpy as np

from eqexplore.experiments.cli import parse_seeds
from eqexplore.experiments.config import load_config
from eqexplore.experiments.scenarios import run_trial, summarize, trial_metrics, write_summary, write_trial

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seeds", type=parse_seeds, default=list(range(10)))
    p.add_argument("--out", type=Path, default=Path("out/shape"))
    args = p.parse_args(argv)

    records, failures = [], []
    for name in ("shape_active", "shape_equilibrium"):
        base = load_config(CONFIGS / f"{name}.ini")
        for seed in args.seeds:
            rec = run_trial(base.with_seed(seed))
            write_trial(rec, args.out / name / f"seed_{seed}")
            records.append(rec)
            failures += rec.failures
    write_summary(summarize(records), args.out / "summary.json")

    act = [trial_metrics(r) for r in records if r.config.scenario.method == "active"]
    eq = [trial_metrics(r) for r in records if r.config.scenario.method == "equilibrium"]
    print(f"{'seed':>4} {'rmse active':>12} {'rmse equil.':>12} {'max|x-x0|/r':>12} {'settled':>8}")
    for a, b in zip(act, eq):
        print(f"{a['seed']:>4} {a['final_model_l2']:>12.4f} {b['final_model_l2']:>12.4f} "
              f"{a['max_x_norm'] / a['radius']:>12.3f} {str(a['settled_after_last_window']):>8}")
    wins = sum(a["final_model_l2"] < b["final_model_l2"] for a, b in zip(act, eq))
    print(f"active wins {wins}/{len(act)}; mean rmse {np.mean([a['final_model_l2'] for a in act]):.4f} "
          f"vs {np.mean([b['final_model_l2'] for b in eq]):.4f}")
    for msg in failures:
        print(f"FAILED: {msg}", file=sys.stderr)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
