"""Average regret Reg_t / t in convex mode against the exact hindsight comparator.

    python3 scripts/regret.py --seeds 10 --rounds 400
"""

import argparse
from pathlib import Path

import numpy as np

from mmofl.experiment import load_config, run_experiment

CONFIG = Path(__file__).parent / "configs" / "convex_regret.yaml"


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--rounds", type=int, default=400)
    args = ap.parse_args(argv)
    cfg = load_config(CONFIG).with_overrides(train={"rounds": args.rounds})
    cum = np.array([[r.cum_regret for r in run_experiment(cfg, s).records] for s in range(args.seeds)])
    avg = cum.mean(axis=0) / np.arange(1, args.rounds + 1)
    print(f"{'t':>6} {'Reg_t/t':>10}")
    for t in sorted({max(1, args.rounds * q // 8) for q in range(1, 9)}):
        print(f"{t:>6} {avg[t - 1]:>10.5f}")
    print(f"min final regret over seeds: {cum[:, -1].min():.4g}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
