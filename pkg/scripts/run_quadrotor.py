"""Quadrotor model learning: active exploration against motor babble over seeds 0..9.

    python scripts/run_quadrotor.py [--seeds 0..9] [--out out/quadrotor]
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
    p.add_argument("--out", type=Path, default=Path("out/quadrotor"))
    args = p.parse_args(argv)

    records, failures = [], []
    for name in ("quad_active", "quad_babble"):
        base = load_config(CONFIGS / f"{name}.ini")
        for seed in args.seeds:
            rec = run_trial(base.with_seed(seed))
            write_trial(rec, args.out / name / f"seed_{seed}")
            records.append(rec)
            failures += rec.failures
    write_summary(summarize(records), args.out / "summary.json")

    act = [trial_metrics(r) for r in records if r.config.scenario.method == "active"]
    bab = [trial_metrics(r) for r in records if r.config.scenario.method == "babble"]
    print(f"{'seed':>4} {'L2 active':>10} {'L2 babble':>10} {'min-delta act.':>15} {'min-delta bab.':>15}")
    for a, b in zip(act, bab):
        print(f"{a['seed']:>4} {a['final_model_l2']:>10.3f} {b['final_model_l2']:>10.3f} "
              f"{a['final_min_delta']:>15.4f} {b['final_min_delta']:>15.4f}")
    if act:
        lam = np.mean([a["lambda_quartiles"] for a in act], axis=0)
        dj = np.mean([a["djdlam_quartiles"] for a in act], axis=0)
        print("lambda quartile means:", np.round(lam, 4))
        print("djdlam quartile means:", np.round(dj, 3))
    for msg in failures:
        print(f"FAILED: {msg}", file=sys.stderr)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
