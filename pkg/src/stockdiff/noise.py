"""Volatility- and cluster-aware significance scores and the adaptive noise schedule."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


def local_variance(series, w):
    """Mean squared deviation of each point from its neighbours within ``w`` steps.

    Windows are truncated at the series ends and divided by the number of
    points actually inside them.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        raise ValueError("local_variance: empty series")
    if w < 1:
        raise ValueError("window half-width must be >= 1")
    n = x.size
    out = np.empty(n)
    for t in range(n):
        lo, hi = max(0, t - w), min(n, t + w + 1)
        d = x[t] - x[lo:hi]
        out[t] = (d * d).sum() / (hi - lo)
    return out


def normalize_variance(v):
    v = np.asarray(v, dtype=np.float64)
    peak = v.max() if v.size else 0.0
    if peak <= 0:
        return np.zeros_like(v)
    return v / peak


def dtw(a, b):
    """Unconstrained DTW with squared-difference cost, path anchored at both ends."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("dtw: empty input")
    cost = (a[:, None] - b[None, :]) ** 2
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row_prev = acc[i - 1]
        row = acc[i]
        c = cost[i - 1]
        for j in range(1, m + 1):
            best = row_prev[j - 1]
            if row_prev[j] < best:
                best = row_prev[j]
            if row[j - 1] < best:
                best = row[j - 1]
            row[j] = c[j - 1] + best
    return float(acc[n, m])


def intra_cluster_influence(series, labels, i):
    """``1 / (1 + dtw(series_i, mean of the other members of i's cluster))``.

    ``series`` is (N, T), typically the close channel. Singleton clusters
    have no peers and get the neutral influence 1.
    """
    series = np.asarray(series, dtype=np.float64)
    labels = np.asarray(labels)
    peers = np.flatnonzero((labels == labels[i]) & (np.arange(len(labels)) != i))
    if peers.size == 0:
        return 1.0
    return 1.0 / (1.0 + dtw(series[i], series[peers].mean(axis=0)))


@dataclass
class SignificanceScore:
    per_stock_per_time: np.ndarray  # (N, S) in [0, 1]
    alpha: float
    window: int

    def per_time(self):
        """Cross-stock mean, the I(t) driving a shared per-timepoint schedule."""
        return self.per_stock_per_time.mean(axis=0)


def integrated_score(series, labels, alpha=0.5, w=2):
    """Mix each stock's normalised local variance with its cluster's.

    ``raw[i, t] = alpha * vnorm_i(t) + (1 - alpha) * influence_i * vnorm_cluster(i)(t)``
    where the cluster term is the normalised local variance of the cluster
    mean series. The grid is finally divided by its maximum.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    series = np.asarray(series, dtype=np.float64)
    labels = np.asarray(labels)
    n = series.shape[0]
    own = np.stack([normalize_variance(local_variance(series[i], w)) for i in range(n)])
    cluster_v = {}
    for c in np.unique(labels):
        members = labels == c
        cluster_v[c] = normalize_variance(local_variance(series[members].mean(axis=0), w))
    raw = np.empty_like(own)
    for i in range(n):
        infl = intra_cluster_influence(series, labels, i) if alpha < 1.0 else 1.0
        raw[i] = alpha * own[i] + (1.0 - alpha) * infl * cluster_v[labels[i]]
    return SignificanceScore(normalize_variance(raw), alpha, w)


def history_score(window, labels, n_future, alpha=0.5, w=2):
    """Score a forecasting window from its observed prefix only.

    ``window`` is (N, S) with the last ``n_future`` steps unknown; those
    steps inherit the score of the last observed step.
    """
    window = np.asarray(window, dtype=np.float64)
    observed = window[:, : window.shape[1] - n_future]
    sc = integrated_score(observed, labels, alpha, w)
    grid = sc.per_stock_per_time
    if n_future:
        grid = np.concatenate([grid, np.repeat(grid[:, -1:], n_future, axis=1)], axis=1)
    return SignificanceScore(grid, alpha, w)


# -- schedule -------------------------------------------------------------

BETA_START = 1e-4
BETA_CLIP = (1e-5, 0.999)


@dataclass
class NoiseSchedule:
    beta: np.ndarray  # (..., K, S)
    alpha_bar: np.ndarray  # (..., K, S)
    beta_min: float = BETA_CLIP[0]
    beta_max: float = BETA_CLIP[1]

    @property
    def K(self):
        return self.beta.shape[-2]

    @property
    def length(self):
        return self.beta.shape[-1]


def base_betas(K, beta_base_max):
    if K < 1:
        raise ValueError("K must be >= 1")
    if not 0.0 < beta_base_max < 1.0:
        raise ValueError("beta_base_max must lie in (0, 1)")
    return np.linspace(BETA_START, beta_base_max, K)


def build_schedule(score, K, beta_base_max=0.2, gamma=0.5, length=None):
    """Per-timepoint linear schedule modulated by the significance I(t).

    ``beta_k(t) = clip(base_k * (1 - gamma + 2 * gamma * I(t)))``; I(t) = 0.5
    or gamma = 0 leave the base schedule untouched. ``score`` may be a
    :class:`SignificanceScore`, a length-S array, or None (vanilla schedule,
    which then needs ``length``).
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    base = base_betas(K, beta_base_max)
    if score is None:
        it = np.full(length, 0.5)
    elif isinstance(score, SignificanceScore):
        it = score.per_time()
    else:
        it = np.asarray(score, dtype=np.float64)
    factor = 1.0 - gamma + 2.0 * gamma * it
    beta = np.clip(base[:, None] * factor[None, :], *BETA_CLIP)
    return NoiseSchedule(beta, np.cumprod(1.0 - beta, axis=0))


def stack_schedules(schedules):
    return NoiseSchedule(np.stack([s.beta for s in schedules]), np.stack([s.alpha_bar for s in schedules]))


def export_schedule_csv(path, schedule, which="beta"):
    """Rows are timepoints, columns diffusion steps 1..K."""
    table = getattr(schedule, which)
    if table.ndim != 2:
        raise ValueError("export a single (K, S) schedule")
    lines = ["t," + ",".join(f"k{k}" for k in range(1, table.shape[0] + 1))]
    for t in range(table.shape[1]):
        lines.append(f"{t}," + ",".join(f"{v:.12g}" for v in table[:, t]))
    Path(path).write_text("\n".join(lines) + "\n")


def export_score_csv(path, score, symbols):
    """Rows are timepoints, columns stocks."""
    grid = score.per_stock_per_time
    lines = ["t," + ",".join(symbols)]
    for t in range(grid.shape[1]):
        lines.append(f"{t}," + ",".join(f"{v:.12g}" for v in grid[:, t]))
    Path(path).write_text("\n".join(lines) + "\n")
