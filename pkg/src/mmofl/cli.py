"""Command-line runner: ``mmofl run | sweep | gen-data | emit-template``.

Output root resolution: ``--out`` wins, then the ``MMOFL_OUT`` environment
variable, then ``experiment.output_dir`` from the config.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import datagen as D
from . import metrics as MX
from .experiment import (
    TEMPLATE,
    ConfigError,
    ExperimentConfig,
    default_config,
    dump_config,
    load_config,
    load_dataset,
    run_experiment,
    validate,
)
from .protocol import Strategy

ENV_OUT = "MMOFL_OUT"
AXES = ("lambda", "alpha", "bits", "delay", "strategy")
EVENT_COLUMNS = ("round", "client", "strategy", "modalities_available", "local_loss", "upload_bytes")
SUMMARY_COLUMNS = ("axis", "value", "final_acc_mean", "final_acc_std", "final_quartile_acc_mean", "seeds")


class UsageError(Exception):
    pass


# --- helpers ---------------------------------------------------------------------------

def _write_text_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"0,1,2"`` or a range ``"0-9"``."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                lo, hi = part.split("-", 1)
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise UsageError(f"--seeds: cannot parse {part!r}") from None
    if not out:
        raise UsageError("--seeds: no seeds given")
    if len(set(out)) != len(out):
        raise UsageError("--seeds: duplicate seeds")
    return tuple(out)


def parse_axis_values(axis: str, text: str) -> list:
    raw = [v.strip() for v in text.split(",") if v.strip()]
    if not raw:
        raise UsageError("--values: nothing to sweep")
    try:
        if axis in ("lambda", "alpha"):
            vals = [float(v) for v in raw]
        elif axis in ("bits", "delay"):
            vals = [int(v) for v in raw]
        else:
            vals = [Strategy.parse(v) for v in raw]
    except ValueError as exc:
        raise UsageError(f"--values: {exc}") from None
    if len(set(vals)) != len(vals):
        raise UsageError(f"--values: duplicate values for axis {axis!r}")
    return vals


def apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "lambda":
        return cfg.with_overrides(schedule={"lam": value})
    if axis == "alpha":
        return cfg.with_overrides(partition=dataclasses.replace(cfg.partition, alpha=value))
    if axis == "bits":
        return cfg.with_overrides(pmm={"bits": value})
    if axis == "delay":
        return cfg.with_overrides(pmm={"delay": value})
    return cfg.with_overrides(train={"strategy": value})


def _value_label(value) -> str:
    return value.value if isinstance(value, Strategy) else f"{value:g}" if isinstance(value, float) else str(value)


def output_root(args_out: str | None, cfg: ExperimentConfig) -> Path:
    if args_out:
        return Path(args_out)
    return Path(os.environ.get(ENV_OUT) or cfg.output_dir)


def mean_rows(per_seed: Sequence[Sequence[dict]]) -> list[dict]:
    """Round-wise mean over seeds; the seed column is set to -1."""
    out = []
    for rows in zip(*per_seed):
        row = dict(rows[0])
        for col in MX.CSV_COLUMNS:
            if col in ("round", "strategy", "lambda", "alpha", "b", "delay"):
                continue
            vals = [r[col] for r in rows]
            if col in ("model_bits", "proto_bits", "opc_count"):
                row[col] = int(round(float(np.mean(vals))))
            else:
                row[col] = float(np.mean(vals))
        row["seed"] = -1
        out.append(row)
    return out


def write_plot_data(path: Path, rows: Sequence[dict], columns=("test_acc", "cum_regret", "proto_bits")) -> None:
    """gnuplot-friendly whitespace table: round followed by ``columns``."""
    lines = ["# round " + " ".join(columns)]
    for r in rows:
        lines.append(" ".join([str(r["round"])] + [MX._fmt(r[c]) for c in columns]))
    _write_text_atomic(path, "\n".join(lines) + "\n")


# --- one cell = one config x its seeds ------------------------------------------------

def _run_seed(job) -> tuple[int, list[dict]]:
    cfg, seed, out_dir, threads = job
    out_dir = Path(out_dir)
    res = run_experiment(cfg, seed, workers=threads, checkpoint=out_dir / f"checkpoint_seed{seed}.zip")
    rows = res.rows()
    MX.export_csv(rows, out_dir / f"seed{seed}.csv")
    events = [
        {
            "round": e.round,
            "client": e.client,
            "strategy": e.strategy,
            "modalities_available": "".join(str(int(a)) for a in e.available),
            "local_loss": e.local_loss,
            "upload_bytes": e.upload_bytes,
        }
        for e in res.client_events
    ]
    MX.write_csv_atomic(out_dir / f"events_seed{seed}.csv", EVENT_COLUMNS, events)
    res.schedule.export_csv(out_dir / f"schedule_seed{seed}.csv")
    return seed, rows


def run_cells(cells: Sequence[tuple[ExperimentConfig, Path]], workers: int, emit_plots: bool) -> list[list[list[dict]]]:
    """Run every (cell, seed) job, in a process pool when ``workers > 1``.

    Returns per-cell lists of per-seed row lists, in seed order.
    """
    jobs = []
    for cfg, out_dir in cells:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_text_atomic(out_dir / "config.yaml", dump_config(cfg))
        jobs.extend((cfg, s, str(out_dir), 1) for s in cfg.seeds)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_seed, jobs))
    else:
        results = [_run_seed(j) for j in jobs]
    out = []
    pos = 0
    for cfg, out_dir in cells:
        mine = results[pos : pos + len(cfg.seeds)]
        pos += len(cfg.seeds)
        per_seed = [rows for _, rows in mine]
        mean = mean_rows(per_seed)
        MX.export_csv(mean, out_dir / "mean.csv")
        if emit_plots:
            for seed, rows in mine:
                write_plot_data(out_dir / f"seed{seed}.dat", rows)
            write_plot_data(out_dir / "mean.dat", mean)
        out.append(per_seed)
    return out


def _final_stats(per_seed: Sequence[Sequence[dict]]) -> tuple[float, float, float]:
    finals = [rows[-1]["test_acc"] for rows in per_seed if rows]
    fq = []
    for rows in per_seed:
        if rows:
            n = len(rows)
            fq.append(float(np.mean([r["test_acc"] for r in rows[3 * n // 4 :]])))
    if not finals:
        return math.nan, math.nan, math.nan
    return float(np.mean(finals)), float(np.std(finals)), float(np.mean(fq))


# --- verbs -------------------------------------------------------------------------------

def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if getattr(args, "seeds", None):
        cfg = dataclasses.replace(cfg, seeds=parse_seeds(args.seeds))
    validate(cfg)
    if cfg.data.source == "external":
        load_dataset(cfg)  # raises ConfigError on shape disagreement
    return cfg


def cmd_run(args) -> int:
    if args.emit_template:
        sys.stdout.write(TEMPLATE)
        return 0
    cfg = _resolve(args)
    out = output_root(args.out, cfg)
    (per_seed,) = run_cells([(cfg, out)], args.workers, args.emit_plots)
    acc, std, fq = _final_stats(per_seed)
    print(f"{cfg.train.strategy.value}: {len(cfg.seeds)} seed(s), final test_acc {acc:.4f} +/- {std:.4f}, "
          f"final-quartile {fq:.4f} -> {out}")
    return 0


def cmd_sweep(args) -> int:
    if args.axis not in AXES:
        raise UsageError(f"--axis must be one of {', '.join(AXES)}")
    base = _resolve(args)
    values = parse_axis_values(args.axis, args.values)
    cells = []
    problems = []
    for v in values:
        try:
            cfg = apply_axis(base, args.axis, v)
            validate(cfg)
            cells.append((v, cfg))
        except (ConfigError, ValueError) as exc:
            problems.append(f"{args.axis}={_value_label(v)}: {exc}")
    if problems:
        raise ConfigError(problems)
    root = output_root(args.out, base)
    grids = run_cells([(cfg, root / f"{args.axis}={_value_label(v)}") for v, cfg in cells], args.workers, args.emit_plots)
    summary = []
    for (v, cfg), per_seed in zip(cells, grids):
        acc, std, fq = _final_stats(per_seed)
        summary.append(
            {
                "axis": args.axis,
                "value": _value_label(v),
                "final_acc_mean": acc,
                "final_acc_std": std,
                "final_quartile_acc_mean": fq,
                "seeds": len(cfg.seeds),
            }
        )
    _write_text_atomic(root / "config.yaml", dump_config(base))
    MX.write_csv_atomic(root / "summary.csv", SUMMARY_COLUMNS, summary)
    print(f"{'value':>10}  {'final_acc':>10}  {'std':>8}  {'last_25%':>9}")
    for row in summary:
        print(f"{row['value']:>10}  {row['final_acc_mean']:>10.4f}  {row['final_acc_std']:>8.4f}  {row['final_quartile_acc_mean']:>9.4f}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config) if args.config else default_config()
    spec = cfg.data.synthetic
    if args.seeds:
        seeds = parse_seeds(args.seeds)
        if len(seeds) != 1:
            raise UsageError("gen-data takes a single --seeds value")
        spec = dataclasses.replace(spec, seed=seeds[0])
    ds = D.generate_synthetic(spec)
    out = output_root(args.out, cfg)
    manifest = D.write_dataset(ds, out)
    print(f"wrote {len(ds)} samples, {ds.num_modalities} modalities, {ds.num_classes} classes -> {manifest}")
    return 0


def cmd_emit_template(args) -> int:
    if args.out:
        path = Path(args.out)
        if path.exists():
            raise UsageError(f"{path} already exists")
        _write_text_atomic(path, TEMPLATE)
    else:
        sys.stdout.write(TEMPLATE)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmofl", description="Multimodal online federated learning simulator")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, seeds=True, workers=True):
        sp.add_argument("--config", help="YAML experiment config (defaults to the built-in template)")
        sp.add_argument("--out", help=f"output directory (else ${ENV_OUT}, else experiment.output_dir)")
        if seeds:
            sp.add_argument("--seeds", help="comma list or range, e.g. 0-9; overrides experiment.seeds")
        if workers:
            sp.add_argument("--workers", type=int, default=1, help="worker processes across seeds/cells")
            sp.add_argument("--emit-plots", action="store_true", help="also write gnuplot .dat files")

    run = sub.add_parser("run", help="run one configuration for every seed")
    common(run)
    run.add_argument("--emit-template", action="store_true", help="print the documented config template and exit")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="ablation sweep along one axis")
    common(sweep)
    sweep.add_argument("--axis", required=True, choices=AXES)
    sweep.add_argument("--values", required=True, help="comma-separated axis values")
    sweep.set_defaults(func=cmd_sweep)

    gen = sub.add_parser("gen-data", help="write the synthetic dataset as CSVs plus a manifest")
    common(gen, workers=False)
    gen.set_defaults(func=cmd_gen_data)

    tpl = sub.add_parser("emit-template", help="print or write the config template")
    tpl.add_argument("--out", help="write to this file instead of stdout")
    tpl.set_defaults(func=cmd_emit_template)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
