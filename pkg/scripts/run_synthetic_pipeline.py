#!/usr/bin/env python3
"""End-to-end experiment on a synthetic universe.

Generates sinusoidal price histories, trains the forecaster for every
ticker/run pair, writes test and validation predictions, evaluates against a
persistence baseline, and builds the mean-variance portfolio backtest — all
through the same command-line entry points a user would call by hand.

Example:
    python3 scripts/run_synthetic_pipeline.py --workdir runs/demo --epochs 5
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from dva.cli import main as dva


def build_configs(args) -> tuple[Path, Path]:
    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    base = {
        "process": "sinusoid",
        "length": args.length,
        "noise_scale": args.noise,
        "amplitude": 0.1,
        "period": 12.0,
        "start_price": 1.0,
        "volume_noise": 0.05,
        "intraday_scale": 0.2,
    }
    tickers = {
        f"SYN{k:02d}": dict(base, phase=float(k)) for k in range(args.tickers)
    }
    spec = work / "synth.json"
    spec.write_text(
        json.dumps(
            {"schema_version": 1, "seed": args.seed, "tickers": tickers}, indent=2
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
                "portfolio": {"lambda": 0.1},
            },
            indent=2,
        )
        + "\n"
    )
    return spec, run


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", default="runs/synthetic")
    parser.add_argument("--tickers", type=int, default=3)
    parser.add_argument("--length", type=int, default=400)
    parser.add_argument("--noise", type=float, default=0.01)
    parser.add_argument("--runs", type=int, default=2)
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args()

    spec, run = build_configs(args)
    data = str(Path(args.workdir) / "data")
    steps = [
        ["synth", "--spec", str(spec), "--out", data, "--force"],
        ["ingest-check", "--config", str(run)],
        ["train", "--config", str(run), "--jobs", str(args.jobs), "--force"],
        ["predict", "--config", str(run), "--force"],
        ["evaluate", "--config", str(run), "--force"],
        ["portfolio", "--config", str(run), "--force"],
    ]
    for argv in steps:
        print(f"$ dva {' '.join(argv)}")
        code = dva(argv)
        if code != 0:
            print(f"step failed with exit code {code}")
            return code
    out = Path(args.workdir) / "out"
    print(f"\nartifacts under {out}:")
    for name in ("metrics.json", "report.json", "uncertainty.csv", "portfolio.json"):
        print(f"  {out / name}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
