"""Movement metrics, ensemble CRPS, and the daily top-k long backtest."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_labels(cls, pred, true):
        pred = np.asarray(pred).astype(bool)
        true = np.asarray(true).astype(bool)
        return cls(int((pred & true).sum()), int((pred & ~true).sum()),
                   int((~pred & ~true).sum()), int((~pred & true).sum()))

    def accuracy(self):
        return (self.tp + self.tn) / self.total

    def f1(self):
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0

    def mcc(self):
        tp, fp, tn, fn = self.tp, self.fp, self.tn, self.fn
        denom = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
        if denom == 0:
            return 0.0
        return (tp * tn - fp * fn) / denom


def movement_metrics(labels_pred, labels_true):
    """(accuracy, f1, mcc) for binary up/down labels."""
    labels_pred = np.asarray(labels_pred)
    labels_true = np.asarray(labels_true)
    if labels_pred.shape != labels_true.shape:
        raise ValueError("prediction and truth lengths differ")
    if labels_pred.size == 0:
        raise ValueError("no labels to evaluate")
    for arr in (labels_pred, labels_true):
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("labels must be binary 0/1")
    cm = ConfusionCounts.from_labels(labels_pred, labels_true)
    return cm.accuracy(), cm.f1(), cm.mcc()


def crps(samples, observed):
    """Ensemble CRPS ``E|X - y| - 0.5 E|X - X'|``.

    The spread term uses the sorted-sample identity
    ``sum_{i,j} |x_i - x_j| = 2 sum_i (2i - S - 1) x_(i)`` (1-based ranks),
    so the cost is O(S log S). Works along the last axis.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64), axis=-1)
    y = np.asarray(observed, dtype=np.float64)
    s = x.shape[-1]
    if s < 1:
        raise ValueError("need at least one sample")
    skill = np.abs(x - y[..., None]).mean(axis=-1)
    ranks = 2.0 * np.arange(1, s + 1) - s - 1
    spread = 2.0 * (x * ranks).sum(axis=-1) / (s * s)
    return np.maximum(skill - 0.5 * spread, 0.0)


def cumulative_return(daily_returns):
    return float(np.prod(1.0 + np.asarray(daily_returns, dtype=np.float64)) - 1.0)


def sharpe(daily_returns, periods_per_year=252):
    """Annualised mean/std with population std; NaN (plus a warning) when std is zero."""
    r = np.asarray(daily_returns, dtype=np.float64)
    if r.size < 2:
        raise ValueError("sharpe needs at least two observations")
    sd = r.std()
    if sd == 0 or not np.isfinite(sd) or sd < 1e-15 * max(1.0, abs(r.mean())):
        warnings.warn("zero return volatility; Sharpe ratio undefined", RuntimeWarning)
        return float("nan")
    return float(r.mean() / sd * math.sqrt(periods_per_year))


@dataclass
class BacktestLedger:
    k: int
    daily_returns: list
    dates: list
    trades: list = field(default_factory=list)  # per day: [(symbol, predicted, realized), ...]
    cumulative_return: float = 0.0
    sharpe: float = float("nan")


def realized_returns(panel, days, close="close"):
    """Close-to-next-close simple returns for trading days ``days``: (D, N)."""
    c = panel.values[:, panel.channel(close), :]
    days = np.asarray(days)
    return (c[:, days + 1] / c[:, days] - 1.0).T


def backtest(predicted, realized, symbols, k, cost_bps=0.0, dates=None, periods_per_year=252):
    """Daily buy-hold-sell: long the top-k predicted stocks at close, exit next close.

    ``predicted`` and ``realized`` are (D, N) next-day returns. Equal weight;
    the round-trip cost ``2 * cost_bps`` is charged every day. Ranking ties
    go to the earlier symbol.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    realized = np.asarray(realized, dtype=np.float64)
    if predicted.shape != realized.shape or predicted.ndim != 2:
        raise ValueError("predicted and realized must both be (days, stocks)")
    d, n = predicted.shape
    if d < 2:
        raise ValueError("backtest needs at least two test days")
    if not 1 <= k <= n:
        raise ValueError(f"portfolio size k={k} outside [1, {n}]")
    dates = list(dates) if dates is not None else list(range(d))
    cost = 2.0 * cost_bps / 1e4
    order_idx = np.arange(n)
    daily, trades = [], []
    for t in range(d):
        pick = np.lexsort((order_idx, -predicted[t]))[:k]
        # sum in universe order so k = N reproduces the market mean bit for bit
        daily.append(float(realized[t, np.sort(pick)].mean() - cost))
        trades.append([(symbols[i], float(predicted[t, i]), float(realized[t, i])) for i in pick])
    ledger = BacktestLedger(k, daily, dates, trades)
    ledger.cumulative_return = cumulative_return(daily)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ledger.sharpe = sharpe(daily, periods_per_year)
    return ledger


def write_trade_log(path, ledger):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "rank", "symbol", "predicted_return", "realized_return", "portfolio_return"])
        for date, day_trades, r in zip(ledger.dates, ledger.trades, ledger.daily_returns):
            for rank, (sym, p, q) in enumerate(day_trades, start=1):
                w.writerow([date, rank, sym, f"{p:.10g}", f"{q:.10g}", f"{r:.10g}"])


def metric_report(accuracy, f1, mcc, crps_value, ledger):
    def clean(v):
        v = float(v)
        return None if not math.isfinite(v) else v

    return {
        "accuracy": clean(accuracy),
        "f1": clean(f1),
        "mcc": clean(mcc),
        "crps": clean(crps_value),
        "sharpe": clean(ledger.sharpe),
        "irr": clean(ledger.cumulative_return),
        "n_days": len(ledger.daily_returns),
        "k": ledger.k,
    }


def write_report(path, report):
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
