#!/usr/bin/env python3
"""Loss-weight grid sweep on a synthetic universe.

Trains one experiment per (zeta, eta) cell — zeta weighs the KL terms, eta
the score-matching penalty — and prints the summary table sorted by the mean
test MSE, highlighting the best cell. By default the grid is the 0.1-step
ladder over (0, 1] for both weights; pass e.g. ``--zeta-grid 0.25,0.5,1.0``
for a custom one.

Example:
    python3 scripts/run_weight_sweep.py --workdir runs/sweep --epochs 3 \
        --zeta-grid 0.25,0.5 --eta-grid 0.5,1.0
"""

from __future__ import annotations

import argparse
import csv
import json
from pathlib import Path

from dva.cli import main as dva


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", default="runs/sweep")
    parser.add_argument("--tickers", type=int, default=2)
    parser.add_argument("--length", type=int, default=300)
    parser.add_argument("--runs", type=int, default=1)
    parser.add_argument("--epochs", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--zeta-grid", default=None, help="comma-separated weights")
    parser.add_argument("--eta-grid", default=None, help="comma-separated weights")
    args = parser.parse_args()

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    base = {
        "process": "sinusoid",
        "length": args.length,
        "noise_scale": 0.02,
        "amplitude": 0.1,
        "period": 12.0,
        "start_price": 1.0,
        "volume_noise": 0.05,
        "intraday_scale": 0.2,
    }
    spec = work / "synth.json"
    spec.write_text(
        json.dumps(
            {
                "schema_version": 1,
                "seed": args.seed,
                "tickers": {
                    f"SYN{k:02d}": dict(base, phase=float(k))
                    for k in range(args.tickers)
                },
            },
            indent=2,
        )
        + "\n"
    )
    run = work / "run.json"
    run.write_text(
        json.dumps(
            {
                "schema_version": 1,
                "data_dir": str(work / "data"),
                "tickers_file": str(work / "data" / "tickers.txt"),
                "out_dir": str(work / "out"),
                "runs": args.runs,
                "epochs": args.epochs,
                "seed": args.seed,
            },
            indent=2,
        )
        + "\n"
    )

    synth_argv = ["synth", "--spec", str(spec), "--out", str(work / "data"), "--force"]
    sweep_argv = ["sweep", "--config", str(run), "--jobs", str(args.jobs), "--force"]
    if args.zeta_grid:
        sweep_argv += ["--zeta-grid", args.zeta_grid]
    if args.eta_grid:
        sweep_argv += ["--eta-grid", args.eta_grid]
    for argv in (synth_argv, sweep_argv):
        print(f"$ dva {' '.join(argv)}")
        code = dva(argv)
        if code != 0:
            print(f"step failed with exit code {code}")
            return code

    summary = work / "out" / "sweep" / "summary.csv"
    with open(summary, newline="") as fh:
        rows = list(csv.DictReader(fh))
    rows.sort(key=lambda r: float(r["mean_of_stock_means"]))
    print(f"\n{summary} (best first):")
    print(f"{'zeta':>8} {'eta':>8} {'mean MSE':>12} {'mean SD':>12}")
    for i, row in enumerate(rows):
        marker = "  <- best" if i == 0 else ""
        print(
            f"{float(row['zeta']):>8g} {float(row['eta']):>8g} "
            f"{float(row['mean_of_stock_means']):>12.6f} "
            f"{float(row['mean_of_stock_sds']):>12.6f}{marker}"
        )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
