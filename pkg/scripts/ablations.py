"""PMM ablations: missing rate, non-IID level, quantizer bits and OPC delay.

    python3 scripts/ablations.py --out runs/ablations --seeds 0-9 --workers 4
    python3 scripts/ablations.py --only bits,delay
"""

import argparse
import csv
from pathlib import Path

from mmofl.cli import main as mmofl

CONFIG = Path(__file__).parent / "configs" / "benchmark.yaml"
AXES = {
    "lambda": "0.1,0.5,0.7",
    "alpha": "1,10,100",
    "bits": "2,4,8,32",
    "delay": "0,2,4,8",
}


def final_bits(cell: Path) -> float:
    with open(cell / "mean.csv") as fh:
        return float(list(csv.DictReader(fh))[-1]["proto_bits"])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--seeds", default="0-9")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--only", default=",".join(AXES), help="comma list of axes to run")
    args = ap.parse_args(argv)
    for axis in args.only.split(","):
        out = Path(args.out) / axis
        code = mmofl(["sweep", "--config", str(CONFIG), "--axis", axis, "--values", AXES[axis],
                      "--out", str(out), "--seeds", args.seeds, "--workers", str(args.workers), "--emit-plots"])
        if code:
            return code
        if axis in ("bits", "delay"):
            for v in AXES[axis].split(","):
                print(f"  {axis}={v}: final prototype bits {final_bits(out / f'{axis}={v}'):.0f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
