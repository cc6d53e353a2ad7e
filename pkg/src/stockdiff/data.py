"""Feature panels: CSV ingestion, synthetic clustered markets, scaling, windowing."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from stockdiff.relations import RelationTensor


class DataError(ValueError):
    pass


@dataclass
class FeaturePanel:
    symbols: list
    indicators: list
    values: np.ndarray  # (N, P, T)
    timestamps: list

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n, p, t = self.values.shape
        if n != len(self.symbols) or p != len(self.indicators) or t != len(self.timestamps):
            raise DataError(f"panel shape {self.values.shape} disagrees with labels")
        if not np.isfinite(self.values).all():
            raise DataError("panel contains missing or non-finite values")

    @property
    def shape(self):
        return self.values.shape

    @property
    def n_time(self):
        return self.values.shape[2]

    def channel(self, name):
        return self.indicators.index(name)


# -- CSV ------------------------------------------------------------------

def _read_symbol_csv(path, indicator_spec):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if not header or header[0] != "date":
            raise DataError(f"{path}:1: first column must be 'date'")
        for name in indicator_spec:
            if name not in header:
                raise DataError(f"{path}: unknown indicator '{name}'")
        cols = [header.index(name) for name in indicator_spec]
        dates, rows = [], []
        last = None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                d = date.fromisoformat(row[0].strip()).isoformat()
                vals = []
                for c in cols:
                    cell = row[c].strip() if c < len(row) else ""
                    vals.append(float(cell) if cell else np.nan)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: unparseable row ({exc})") from None
            if last is not None and d <= last:
                raise DataError(f"{path}:{lineno}: dates not strictly ascending")
            last = d
            dates.append(d)
            rows.append(vals)
    arr = np.array(rows, dtype=np.float64).reshape(len(rows), len(cols))
    # forward-fill gaps; a gap with nothing before it cannot be filled without look-ahead
    for j in range(arr.shape[1]):
        col = arr[:, j]
        if len(col) and np.isnan(col[0]):
            raise DataError(f"{path}: leading gap in indicator '{indicator_spec[j]}'")
        for i in range(1, len(col)):
            if np.isnan(col[i]):
                col[i] = col[i - 1]
    return dates, arr


def ingest_csv(paths, indicator_spec):
    """Load one ``date,<ind...>`` CSV per symbol, aligned on the common dates."""
    paths = [Path(p) for p in paths]
    if not paths:
        raise DataError("no input files")
    indicator_spec = list(indicator_spec)
    tables = [_read_symbol_csv(p, indicator_spec) for p in paths]
    common = set(tables[0][0])
    for dates, _ in tables[1:]:
        common &= set(dates)
    if not common:
        raise DataError("empty date intersection across symbols")
    keep = sorted(common)
    values = []
    for dates, arr in tables:
        pos = {d: i for i, d in enumerate(dates)}
        values.append(arr[[pos[d] for d in keep]].T)
    return FeaturePanel([p.stem for p in paths], indicator_spec, np.stack(values), keep)


def write_csv(panel, directory, float_format="%.10g"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, sym in enumerate(panel.symbols):
        p = directory / f"{sym}.csv"
        lines = ["date," + ",".join(panel.indicators)]
        for t, d in enumerate(panel.timestamps):
            lines.append(d + "," + ",".join(float_format % v for v in panel.values[i, :, t]))
        p.write_text("\n".join(lines) + "\n")
        paths.append(p)
    return paths


# -- synthetic market -----------------------------------------------------

@dataclass
class SynthParams:
    factor_weight: float = 0.8
    idio_weight: float = 0.2
    factor_vol: float = 0.015
    idio_vol: float = 0.015
    momentum: float = 0.0  # AR(1) coefficient of factor log-returns
    n_random_relations: int = 1
    random_edge_prob: float = 0.15
    indicators: tuple = ("close", "ma5", "volume")
    start_date: str = "2015-01-02"


_KNOWN_INDICATORS = ("close", "open", "ma5", "volume")


def business_days(start, n):
    out, d = [], date.fromisoformat(start)
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d.isoformat())
        d += timedelta(days=1)
    return out


def synth_market(n_stocks, n_clusters, length, rng, params=None):
    """Generate a clustered panel plus ground-truth labels and relations.

    Each cluster shares a latent log-price random walk (optionally with
    autocorrelated returns); a stock's log price is
    ``factor_weight * factor + idio_weight * own_walk`` plus a fixed level.
    Relation 0 links members of the same cluster; further relations are
    sparse random symmetric edge sets.
    """
    params = params or SynthParams()
    if not n_stocks >= n_clusters >= 1:
        raise ValueError("need n_stocks >= n_clusters >= 1")
    for name in params.indicators:
        if name not in _KNOWN_INDICATORS:
            raise ValueError(f"unknown synthetic indicator '{name}'")
    labels = np.arange(n_stocks) * n_clusters // n_stocks

    phi = params.momentum
    shocks = rng.normal((n_clusters, length))
    f_ret = np.zeros((n_clusters, length))
    f_ret[:, 0] = params.factor_vol * shocks[:, 0]
    innov = params.factor_vol * np.sqrt(1.0 - phi * phi)
    for t in range(1, length):
        f_ret[:, t] = phi * f_ret[:, t - 1] + innov * shocks[:, t]
    factor = np.cumsum(f_ret, axis=1)
    idio = np.cumsum(params.idio_vol * rng.normal((n_stocks, length)), axis=1)
    level = np.log(rng.uniform(20.0, 200.0, size=n_stocks))[:, None]
    log_close = level + params.factor_weight * factor[labels] + params.idio_weight * idio
    close = np.exp(log_close)

    open_noise = rng.normal((n_stocks, length))
    vol_noise = rng.normal((n_stocks, length))
    channels = {}
    for name in params.indicators:
        if name == "close":
            channels[name] = close
        elif name == "open":
            prev = np.concatenate([close[:, :1], close[:, :-1]], axis=1)
            channels[name] = prev * np.exp(0.002 * open_noise)
        elif name == "ma5":
            csum = np.cumsum(close, axis=1)
            ma = np.empty_like(close)
            for t in range(length):
                lo = max(0, t - 4)
                ma[:, t] = (csum[:, t] - (csum[:, lo - 1] if lo > 0 else 0.0)) / (t - lo + 1)
            channels[name] = ma
        elif name == "volume":
            ret = np.diff(log_close, axis=1, prepend=log_close[:, :1])
            channels[name] = 1e6 * np.exp(20.0 * np.abs(ret) + 0.1 * vol_noise)
    values = np.stack([channels[name] for name in params.indicators], axis=1)

    symbols = [f"S{i:03d}" for i in range(n_stocks)]
    panel = FeaturePanel(symbols, list(params.indicators), values, business_days(params.start_date, length))

    g = 1 + params.n_random_relations
    bits = np.zeros((n_stocks, n_stocks, g))
    bits[:, :, 0] = labels[:, None] == labels[None, :]
    for r in range(1, g):
        upper = np.triu(rng.uniform(size=(n_stocks, n_stocks)) < params.random_edge_prob, 1)
        bits[:, :, r] = upper | upper.T
    names = ["same_cluster"] + [f"random_{r}" for r in range(1, g)]
    return panel, labels, RelationTensor(names, bits)


PRICE_LIKE = ("close", "open", "high", "low", "ma5", "adj_close")


def to_log_returns(panel, channels=None):
    """Replace price-like channels by daily log returns (drops the first day).

    Other channels are kept as-is. Returns are stationary, so a one-day move
    is a unit-scale quantity after z-scoring rather than a sliver of the
    price level's range.
    """
    channels = [c for c in panel.indicators if c in PRICE_LIKE] if channels is None else list(channels)
    v = panel.values
    if np.any(v[:, [panel.channel(c) for c in channels], :] <= 0):
        raise DataError("log returns need strictly positive prices")
    out = v[:, :, 1:].copy()
    for c in channels:
        j = panel.channel(c)
        out[:, j, :] = np.log(v[:, j, 1:] / v[:, j, :-1])
    return FeaturePanel(panel.symbols, panel.indicators, out, panel.timestamps[1:])


# -- normalisation ------------------------------------------------------

@dataclass
class NormStats:
    mean: np.ndarray  # (N, P)
    std: np.ndarray  # (N, P)


def fit_stats(panel, train_end=None):
    """Per-stock, per-indicator z-score statistics over ``[0, train_end)``."""
    vals = panel.values[:, :, :train_end]
    mean = vals.mean(axis=2)
    std = vals.std(axis=2)
    flat = std == 0
    if flat.any():
        warnings.warn(f"{int(flat.sum())} zero-variance series; using unit divisor", RuntimeWarning)
        std = np.where(flat, 1.0, std)
    return NormStats(mean, std)


def normalize(panel, train_end=None, stats=None):
    stats = stats or fit_stats(panel, train_end)
    values = (panel.values - stats.mean[:, :, None]) / stats.std[:, :, None]
    return FeaturePanel(panel.symbols, panel.indicators, values, panel.timestamps), stats


def denormalize(values, stats):
    """Invert :func:`normalize` on any array whose first two axes are (N, P)."""
    values = np.asarray(values, dtype=np.float64)
    extra = values.ndim - 2
    shape = stats.mean.shape + (1,) * extra
    return values * stats.std.reshape(shape) + stats.mean.reshape(shape)


# -- windowing ----------------------------------------------------------

@dataclass
class TrainingInstance:
    start: int  # panel index of the first history step
    history: np.ndarray  # (N, P, L)
    target: np.ndarray  # (N, P, L + horizon)
    future_mask: np.ndarray  # (L + horizon,)

    @property
    def first_future(self):
        return self.start + self.history.shape[2]

    @property
    def end(self):
        """Panel index one past the last target step."""
        return self.start + self.target.shape[2]


def make_windows(panel, L, horizon=1, stride=1, start=0, stop=None):
    if L < 1 or horizon < 1 or stride < 1:
        raise ValueError("L, horizon and stride must be >= 1")
    stop = panel.n_time if stop is None else stop
    if stop - start < L + horizon:
        raise DataError(f"T={stop - start} too short for L={L} + horizon={horizon}: empty dataset")
    mask = np.zeros(L + horizon)
    mask[L:] = 1.0
    out = []
    for s in range(start, stop - L - horizon + 1, stride):
        target = panel.values[:, :, s : s + L + horizon]
        out.append(TrainingInstance(s, target[:, :, :L], target, mask.copy()))
    return out


@dataclass
class Split:
    train_end: int
    val_end: int
    n_time: int
    fractions: tuple = field(default=(0.7, 0.1, 0.2))


def chronological_split(n_time, fractions=(0.7, 0.1, 0.2), train_end=None, val_end=None):
    """Cut indices for a chronological train/val/test split.

    Explicit cut indices override the fractions.
    """
    if train_end is None:
        train_end = int(round(n_time * fractions[0]))
    if val_end is None:
        val_end = int(round(n_time * (fractions[0] + fractions[1])))
    if not 0 < train_end <= val_end <= n_time:
        raise DataError(f"invalid split cuts {train_end}, {val_end} for T={n_time}")
    return Split(train_end, val_end, n_time, tuple(fractions))


def split_index_for_date(timestamps, cut_date):
    """First panel index whose date is on or after ``cut_date``."""
    for i, d in enumerate(timestamps):
        if d >= cut_date:
            return i
    return len(timestamps)


def split_windows(panel, split, L, horizon=1, stride=1):
    """Windows for each split; a window belongs where its forecast steps fall.

    Training targets end before the validation cut; validation and test
    windows may read history from earlier ranges but forecast only inside
    their own range.
    """
    train = make_windows(panel, L, horizon, stride, 0, split.train_end)
    lo = max(0, split.train_end - L)
    val = make_windows(panel, L, horizon, stride, lo, split.val_end)
    lo = max(0, split.val_end - L)
    test = make_windows(panel, L, horizon, stride, lo, split.n_time)
    return train, val, test
