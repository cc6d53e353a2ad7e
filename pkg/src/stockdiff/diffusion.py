"""Forward corruption, the noise-prediction objective and ancestral sampling.

Every schedule array is per timepoint: ``alpha_bar[..., k - 1, t]``. Batched
schedules carry a leading window axis (B, K, S).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from stockdiff import tensor as T
from stockdiff.noise import NoiseSchedule


class TrainingAborted(RuntimeError):
    pass


@dataclass
class ConditioningBundle:
    history: np.ndarray  # (..., N, P, S) clean target with future steps zeroed
    future_mask: np.ndarray  # (S,)
    head_masks: object = None

    def check(self):
        masked = np.asarray(self.future_mask) > 0
        if np.any(self.history[..., masked] != 0):
            raise ValueError("conditioning history exposes future values")


def make_bundle(target, future_mask, head_masks=None):
    future_mask = np.asarray(future_mask, dtype=np.float64)
    return ConditioningBundle(np.asarray(target) * (1.0 - future_mask), future_mask, head_masks)


def at_step(table, k):
    """Row k (1-based) of a (K, S) or (B, K, S) table, k scalar or per batch item."""
    k = np.asarray(k)
    if table.ndim == 2:
        return table[k - 1]
    if k.ndim == 0:
        return table[:, int(k) - 1]
    return table[np.arange(table.shape[0]), k - 1]


def _expand(coef, ndim):
    """Broadcast a (S,) or (B, S) coefficient over (B, N, P, S) data."""
    if coef.ndim == 1:
        return coef
    return coef.reshape(coef.shape[:1] + (1,) * (ndim - 2) + coef.shape[-1:])


def forward_diffuse(x0, k, schedule, rng):
    """Sample ``x_k = sqrt(abar_k(t)) x0 + sqrt(1 - abar_k(t)) eps`` and return ``(x_k, eps)``."""
    x0 = np.asarray(x0, dtype=np.float64)
    kk = np.asarray(k)
    if np.any(kk < 1) or np.any(kk > schedule.K):
        raise ValueError(f"diffusion step out of range [1, {schedule.K}]: {k}")
    ab = _expand(at_step(schedule.alpha_bar, kk), x0.ndim)
    eps = rng.normal(x0.shape)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, eps


def forward_step(x_prev, k, schedule, rng):
    """One transition ``q(x_k | x_{k-1})`` with the per-timepoint beta_k(t)."""
    b = _expand(at_step(schedule.beta, k), np.ndim(x_prev))
    return np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * rng.normal(np.shape(x_prev))


@dataclass
class Batch:
    target: np.ndarray  # (B, N, P, S)
    cond: np.ndarray  # (B, N, P, S)
    future_mask: np.ndarray  # (S,)
    schedule: NoiseSchedule  # (B, K, S)
    weights: np.ndarray = None  # (B, S) loss weights, optional

    def __len__(self):
        return self.target.shape[0]


def training_step(net, batch, rng, masks, k=None):
    """Draw steps and noise, run the denoiser, return the (weighted) mean squared error.

    Gradients are left on the network parameters.
    """
    b = len(batch)
    if k is None:
        k = rng.integers(1, batch.schedule.K + 1, size=b)
    k = np.broadcast_to(np.asarray(k), (b,))
    x_k, eps = forward_diffuse(batch.target, k, batch.schedule, rng)
    ab = at_step(batch.schedule.alpha_bar, k)
    try:
        eps_hat = net(x_k, batch.cond, batch.future_mask, k, ab, masks)
        err = eps_hat - eps
        if batch.weights is None:
            loss = (err * err).mean()
        else:
            w = batch.weights[:, None, None, :]
            loss = (err * err * w).sum() * (1.0 / (w.sum() * err.shape[1] * err.shape[2]))
    except FloatingPointError as exc:
        raise TrainingAborted(f"non-finite value in training step (k={k.tolist()}): {exc}") from exc
    T.backward(loss)
    return float(loss.data)


def posterior_variance(beta_k, ab_k, ab_prev):
    return (1.0 - ab_prev) / (1.0 - ab_k) * beta_k


def reverse_chain(net, cond, future_mask, schedule, masks, rng):
    """Ancestral sampling of (M, N, P, S) chains from pure noise down to step 0."""
    cond = np.asarray(cond, dtype=np.float64)
    m = cond.shape[0]
    beta = np.broadcast_to(schedule.beta, (m,) + schedule.beta.shape[-2:])
    alpha_bar = np.broadcast_to(schedule.alpha_bar, (m,) + schedule.alpha_bar.shape[-2:])
    x = rng.normal(cond.shape)
    with T.no_grad():
        for k in range(schedule.K, 0, -1):
            ab = alpha_bar[:, k - 1]
            eps = net(x, cond, future_mask, k, ab, masks).data
            b = beta[:, k - 1][:, None, None, :]
            a = ab[:, None, None, :]
            x = (x - b / np.sqrt(1.0 - a) * eps) / np.sqrt(1.0 - b)
            if k > 1:
                a_prev = alpha_bar[:, k - 2][:, None, None, :]
                x = x + np.sqrt(posterior_variance(b, a, a_prev)) * rng.normal(x.shape)
    return x


def sample(net, bundle, schedule, rng, n_samples=1, masks=None):
    """Draw ``n_samples`` forecasts for one window: (n_samples, N, P, S).

    History positions come back as reconstructions, masked positions as
    forecasts.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    bundle.check()
    if masks is None:
        masks = net.mask_stack(bundle.head_masks, bundle.history.shape[-3])
    cond = np.broadcast_to(bundle.history, (n_samples,) + bundle.history.shape[-3:])
    return reverse_chain(net, cond, bundle.future_mask, schedule, masks, rng)


def sample_windows(net, cond, future_mask, schedule, masks, rng, n_samples=1, chunk=256):
    """Sample every window of a batch: returns (B, n_samples, N, P, S)."""
    cond = np.asarray(cond, dtype=np.float64)
    masked = np.asarray(future_mask) > 0
    if np.any(cond[..., masked] != 0):
        raise ValueError("conditioning history exposes future values")
    b = cond.shape[0]
    rep_cond = np.repeat(cond, n_samples, axis=0)
    beta = np.repeat(schedule.beta, n_samples, axis=0) if schedule.beta.ndim == 3 else schedule.beta
    ab = np.repeat(schedule.alpha_bar, n_samples, axis=0) if schedule.alpha_bar.ndim == 3 else schedule.alpha_bar
    outs = []
    for lo in range(0, rep_cond.shape[0], chunk):
        hi = lo + chunk
        sch = NoiseSchedule(beta[lo:hi] if beta.ndim == 3 else beta, ab[lo:hi] if ab.ndim == 3 else ab)
        outs.append(reverse_chain(net, rep_cond[lo:hi], future_mask, sch, masks, rng))
    out = np.concatenate(outs, axis=0)
    return out.reshape((b, n_samples) + cond.shape[1:])


def point_forecast(samples, axis=0):
    """Elementwise median across the sample axis."""
    return np.median(samples, axis=axis)


def movement_labels(forecast_close, last_close, dead_zone=0.0):
    """1 for up, 0 for down; exact ties count as up.

    With a positive ``dead_zone`` (relative move) moves smaller than it are
    labelled -1 (excluded from evaluation).
    """
    forecast_close = np.asarray(forecast_close, dtype=np.float64)
    last_close = np.asarray(last_close, dtype=np.float64)
    diff = forecast_close - last_close
    labels = (diff >= 0).astype(int)
    if dead_zone > 0:
        rel = diff / np.abs(last_close)
        labels = np.where(np.abs(rel) < dead_zone, -1, labels)
    return labels
