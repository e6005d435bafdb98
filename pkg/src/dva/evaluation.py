"""Error aggregation across stocks and runs, plus reference baselines.

Reporting convention: each stock is summarized by the mean and sample
standard deviation (divisor n-1) of its per-run test MSE; the experiment
summary is the mean of the per-stock means and the mean of the per-stock
SDs. A persistence forecast (repeat the last observed return) is the sanity
floor any trained model must beat. The module also owns the prediction-file
format (CSV ``anchor_date,step,y_hat,y_true``) and the uncertainty-vs-
improvement export (CSV ``stock,sd_before,pct_mse_change``).
"""

from __future__ import annotations

import csv
import datetime as dt
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import FEATURE_DIM, R_INDEX, WindowPair
from .errors import ContractError, DataError, ParseError

__all__ = [
    "StockRunResult",
    "StockAggregate",
    "Report",
    "UncertaintyRow",
    "mse",
    "aggregate",
    "report_as_dict",
    "persistence_baseline",
    "uncertainty_improvement",
    "write_uncertainty_csv",
    "write_predictions",
    "load_predictions",
    "scan_prediction_results",
]

PREDICTION_HEADER = ["anchor_date", "step", "y_hat", "y_true"]
UNCERTAINTY_HEADER = ["stock", "sd_before", "pct_mse_change"]


# ---------------------------------------------------------------------------
# Point error
# ---------------------------------------------------------------------------


def mse(pred, target) -> float:
    """Mean of squared differences over every element."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractError(f"mse needs matching shapes, got {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ContractError("mse of empty sequences is undefined")
    return float(np.mean((p - t) ** 2))


def persistence_baseline(window, t_out: int) -> np.ndarray:
    """Repeat the last observed gross return for the whole horizon."""
    w = np.asarray(window, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != FEATURE_DIM:
        raise ContractError(f"expected a (t, {FEATURE_DIM}) feature window, got {w.shape}")
    if w.shape[0] < 1 or t_out < 1:
        raise ContractError("window and horizon must be nonempty")
    return np.full(t_out, w[-1, R_INDEX])


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StockRunResult:
    """Test MSE of one (stock, run) training."""

    stock: str
    run: int
    mse: float

    def validate(self) -> "StockRunResult":
        if not np.isfinite(self.mse) or self.mse < 0:
            raise ContractError(
                f"MSE must be finite and >= 0, got {self.mse} for {self.stock} run {self.run}"
            )
        return self


@dataclass(frozen=True)
class StockAggregate:
    stock: str
    mse_mean: float
    mse_sd: float  # sample SD over runs (divisor n-1); 0.0 for a single run
    runs: tuple[float, ...]  # per-run MSEs in run order


@dataclass(frozen=True)
class Report:
    stocks: tuple[StockAggregate, ...]  # sorted by stock id
    mean_of_means: float
    mean_of_sds: float

    def stock_ids(self) -> tuple[str, ...]:
        return tuple(s.stock for s in self.stocks)


def aggregate(results: Iterable[StockRunResult]) -> Report:
    """Per-stock mean/sample-SD over runs, then means of those across stocks."""
    rows = [r.validate() for r in results]
    if not rows:
        raise ContractError("aggregate needs at least one result")
    by_stock: dict[str, dict[int, float]] = {}
    for r in rows:
        runs = by_stock.setdefault(r.stock, {})
        if r.run in runs:
            raise ContractError(f"duplicate result for {r.stock} run {r.run}")
        runs[r.run] = r.mse
    stocks = []
    for stock in sorted(by_stock):
        vals = np.array([by_stock[stock][run] for run in sorted(by_stock[stock])])
        sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        stocks.append(
            StockAggregate(
                stock=stock,
                mse_mean=float(vals.mean()),
                mse_sd=sd,
                runs=tuple(float(v) for v in vals),
            )
        )
    return Report(
        stocks=tuple(stocks),
        mean_of_means=float(np.mean([s.mse_mean for s in stocks])),
        mean_of_sds=float(np.mean([s.mse_sd for s in stocks])),
    )


def report_as_dict(report: Report) -> dict:
    """JSON-ready view of a report."""
    return {
        "per_stock": {
            s.stock: {
                "mse_mean": s.mse_mean,
                "mse_sd_over_runs": s.mse_sd,
                "runs": list(s.runs),
            }
            for s in report.stocks
        },
        "aggregate": {
            "mean_of_stock_means": report.mean_of_means,
            "mean_of_stock_sds": report.mean_of_sds,
        },
    }


# ---------------------------------------------------------------------------
# Uncertainty-vs-improvement export
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UncertaintyRow:
    stock: str
    sd_before: float
    pct_mse_change: float


def uncertainty_improvement(report_a: Report, report_b: Report) -> list[UncertaintyRow]:
    """Per stock: report A's across-run SD against the percentage MSE change
    from A to B, sorted ascending by the SD."""
    if report_a.stock_ids() != report_b.stock_ids():
        raise ContractError(
            f"reports cover different stock sets: {report_a.stock_ids()} vs {report_b.stock_ids()}"
        )
    b_by_stock = {s.stock: s for s in report_b.stocks}
    rows = []
    for a in report_a.stocks:
        if a.mse_mean == 0.0:
            raise ContractError(
                f"percentage change undefined: stock {a.stock} has zero baseline MSE"
            )
        b = b_by_stock[a.stock]
        pct = 100.0 * (b.mse_mean - a.mse_mean) / a.mse_mean
        rows.append(UncertaintyRow(stock=a.stock, sd_before=a.mse_sd, pct_mse_change=pct))
    rows.sort(key=lambda r: (r.sd_before, r.stock))
    return rows


def write_uncertainty_csv(path, rows: Sequence[UncertaintyRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(UNCERTAINTY_HEADER)
        for r in rows:
            writer.writerow([r.stock, repr(float(r.sd_before)), repr(float(r.pct_mse_change))])


# ---------------------------------------------------------------------------
# Prediction files
# ---------------------------------------------------------------------------


def write_predictions(path, pairs: Sequence[WindowPair], y_hat: np.ndarray) -> None:
    """One row per (window, horizon step); floats use repr for exact round trips."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y_hat.ndim != 2 or y_hat.shape[0] != len(pairs):
        raise ContractError(
            f"predictions {y_hat.shape} do not cover {len(pairs)} windows"
        )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTION_HEADER)
        for pair, row in zip(pairs, y_hat):
            if row.shape != pair.y.shape:
                raise ContractError(
                    f"horizon mismatch: prediction {row.shape} vs target {pair.y.shape}"
                )
            date = pair.anchor_date.isoformat()
            for step in range(row.size):
                writer.writerow(
                    [date, step + 1, repr(float(row[step])), repr(float(pair.y[step]))]
                )


def load_predictions(path) -> tuple[np.ndarray, np.ndarray, list[dt.date]]:
    """Read a prediction file back; returns (y_hat, y_true, anchor dates)."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing artifact: no prediction file {p}")
    y_hat, y_true, dates = [], [], []
    with open(p, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PREDICTION_HEADER:
            raise ParseError(
                f"header must be {','.join(PREDICTION_HEADER)}, got {header}", line=1
            )
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ParseError(f"expected 4 fields, got {len(row)}", line=lineno)
            try:
                dates.append(dt.date.fromisoformat(row[0]))
                step = int(row[1])
                y_hat.append(float(row[2]))
                y_true.append(float(row[3]))
            except ValueError as err:
                raise ParseError(str(err), line=lineno) from None
            if step < 1:
                raise ParseError(f"step must be >= 1, got {step}", line=lineno)
    if not y_hat:
        raise DataError(f"missing artifact: prediction file {p} has no rows")
    return np.array(y_hat), np.array(y_true), dates


_PREDICTION_NAME = re.compile(r"^(?P<stock>.+)_run(?P<run>\d+)\.csv$")


def scan_prediction_results(pred_dir) -> list[StockRunResult]:
    """Turn a directory of ``<stock>_run<k>.csv`` files into per-run MSEs."""
    p = Path(pred_dir)
    if not p.is_dir():
        raise DataError(f"missing artifact: no prediction directory {p}")
    results = []
    for f in sorted(p.iterdir()):
        m = _PREDICTION_NAME.match(f.name)
        if m is None:
            continue
        y_hat, y_true, _ = load_predictions(f)
        results.append(
            StockRunResult(
                stock=m.group("stock"), run=int(m.group("run")), mse=mse(y_hat, y_true)
            )
        )
    if not results:
        raise DataError(f"missing artifact: no prediction files in {p}")
    return results
