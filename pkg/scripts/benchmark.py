"""Strategy comparison (FM, PM, ZF, PMM) on the benchmark configuration.

    python3 scripts/benchmark.py --out runs/benchmark --seeds 0-9 --workers 4
"""

import argparse
import csv
from pathlib import Path

from mmofl.cli import main as mmofl

CONFIG = Path(__file__).parent / "configs" / "benchmark.yaml"


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/benchmark")
    ap.add_argument("--seeds", default="0-9")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args(argv)
    code = mmofl(["sweep", "--config", str(CONFIG), "--axis", "strategy", "--values", "FM,PM,ZF,PMM",
                  "--out", args.out, "--seeds", args.seeds, "--workers", str(args.workers), "--emit-plots"])
    if code:
        return code
    with open(Path(args.out) / "summary.csv") as fh:
        rows = {r["value"]: float(r["final_quartile_acc_mean"]) for r in csv.DictReader(fh)}
    order = sorted(rows, key=rows.get, reverse=True)
    print("ordering by final-quartile accuracy:", " > ".join(order))
    print(f"PMM - PM = {rows['PMM'] - rows['PM']:+.4f}, ZF - PM = {rows['ZF'] - rows['PM']:+.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
