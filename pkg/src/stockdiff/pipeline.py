"""End-to-end glue: data preparation, training loop, forecasting and scoring."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from stockdiff import tensor as T
from stockdiff.data import (
    SynthParams,
    chronological_split,
    make_windows,
    normalize,
    split_index_for_date,
    to_log_returns,
)
from stockdiff.denoiser import DenoiserConfig, DenoiserNet
from stockdiff.diffusion import (
    Batch,
    TrainingAborted,
    at_step,
    forward_diffuse,
    movement_labels,
    point_forecast,
    sample_windows,
    training_step,
)
from stockdiff.evaluation import backtest, crps, metric_report, movement_metrics
from stockdiff.noise import NoiseSchedule, build_schedule, history_score
from stockdiff.relations import aggregate_relations, clusters_from_relations, group_relations

log = logging.getLogger(__name__)


def synth_params(cfg):
    return SynthParams(
        factor_weight=cfg.factor_weight,
        idio_weight=cfg.idio_weight,
        factor_vol=cfg.factor_vol,
        idio_vol=cfg.idio_vol,
        momentum=cfg.momentum,
        n_random_relations=cfg.n_random_relations,
        random_edge_prob=cfg.random_edge_prob,
        indicators=tuple(cfg.indicator_list),
    )


def denoiser_config(cfg, n_indicators=None):
    return DenoiserConfig(
        n_indicators=n_indicators or len(cfg.indicator_list),
        seq_len=cfg.seq_len,
        d_model=cfg.d_model,
        n_masked_heads=cfg.n_masked_heads,
        n_unmasked_heads=cfg.n_unmasked_heads,
        n_encoder_layers=cfg.n_encoder_layers,
        head_dim=cfg.head_dim,
        ff_hidden=cfg.ff_hidden,
        conv_kernel=cfg.conv_kernel,
        dilations=cfg.dilation_tuple,
        emb_dim=cfg.emb_dim,
        emb_base=cfg.emb_base,
        use_relations=cfg.use_relations,
        output_skip=cfg.output_skip,
    )


@dataclass
class WindowSet:
    starts: np.ndarray  # model-panel index of each window's first step
    target: np.ndarray  # (W, N, P, S)
    future_mask: np.ndarray  # (S,)
    schedule: NoiseSchedule  # (W, K, S)
    weights: np.ndarray = None  # (W, S)

    def __len__(self):
        return len(self.starts)

    @property
    def cond(self):
        return self.target * (1.0 - self.future_mask)

    def batch(self, idx):
        idx = np.asarray(idx)
        sch = NoiseSchedule(self.schedule.beta[idx], self.schedule.alpha_bar[idx])
        w = None if self.weights is None else self.weights[idx]
        return Batch(self.target[idx], self.cond[idx], self.future_mask, sch, w)


def build_window_set(instances, labels, cfg, close_idx):
    """Stack windows and attach each one's history-only noise schedule."""
    target = np.stack([w.target for w in instances])
    mask = instances[0].future_mask
    s = target.shape[-1]
    betas, abars, weights = [], [], []
    for inst in instances:
        if cfg.gamma == 0:
            sch = build_schedule(None, cfg.K, cfg.beta_base_max, 0.0, length=s)
            w_t = np.ones(s)
        else:
            score = history_score(inst.target[:, close_idx, :], labels, cfg.horizon, cfg.alpha, cfg.window)
            if cfg.noise_mode == "variance":
                sch = build_schedule(score, cfg.K, cfg.beta_base_max, cfg.gamma)
                w_t = np.ones(s)
            else:
                sch = build_schedule(None, cfg.K, cfg.beta_base_max, 0.0, length=s)
                w_t = 1.0 + cfg.gamma * score.per_time()
        betas.append(sch.beta)
        abars.append(sch.alpha_bar)
        weights.append(w_t)
    weights = np.stack(weights) if cfg.noise_mode == "loss_weight" and cfg.gamma > 0 else None
    starts = np.array([w.start for w in instances])
    return WindowSet(starts, target, mask, NoiseSchedule(np.stack(betas), np.stack(abars)), weights)


@dataclass
class Prepared:
    raw: object  # FeaturePanel as ingested
    model_panel: object  # transformed + z-scored panel the network sees
    stats: object
    offset: int  # raw index = model index + offset
    split: object
    relations: object
    labels: np.ndarray
    head_masks: object
    train: WindowSet
    val: WindowSet
    test: WindowSet
    close_idx: int


def prepare(cfg, raw_panel, relations):
    panel = to_log_returns(raw_panel) if cfg.returns else raw_panel
    offset = raw_panel.n_time - panel.n_time
    n = panel.n_time
    train_end = split_index_for_date(panel.timestamps, cfg.train_end_date) if cfg.train_end_date else None
    val_end = split_index_for_date(panel.timestamps, cfg.val_end_date) if cfg.val_end_date else None
    split = chronological_split(n, (cfg.train_frac, cfg.val_frac, 1 - cfg.train_frac - cfg.val_frac),
                                train_end, val_end)
    model_panel, stats = normalize(panel, split.train_end)
    subset = [s.strip() for s in cfg.cluster_relations.split(",") if s.strip()] or [0]
    labels = clusters_from_relations(relations, subset)
    if cfg.aggregate_relations:
        heads = aggregate_relations(relations, cfg.n_unmasked_heads)
    else:
        heads = group_relations(relations, max(cfg.n_masked_heads, 1), cfg.n_unmasked_heads)
    close_idx = model_panel.channel(cfg.close)

    def windows(lo, hi):
        inst = make_windows(model_panel, cfg.L, cfg.horizon, cfg.stride, lo, hi)
        return build_window_set(inst, labels, cfg, close_idx)

    train = windows(0, split.train_end)
    val = windows(max(0, split.train_end - cfg.L), split.val_end) if split.val_end > split.train_end else None
    test = windows(max(0, split.val_end - cfg.L), n)
    return Prepared(raw_panel, model_panel, stats, offset, split, relations, labels, heads,
                    train, val, test, close_idx)


def build_net(cfg, prepared=None, rng=None):
    rng = rng or T.Rng(cfg.seed, "init")
    n_ind = len(prepared.model_panel.indicators) if prepared is not None else None
    return DenoiserNet(denoiser_config(cfg, n_ind), rng)


def evaluation_loss(net, wset, masks, seed, batch_size=64):
    """Deterministic loss estimate (fixed noise stream) for model selection."""
    rng = T.Rng(seed, "val")
    total, count = 0.0, 0
    with T.no_grad():
        for lo in range(0, len(wset), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(wset)))
            b = wset.batch(idx)
            k = rng.integers(1, b.schedule.K + 1, size=len(idx))
            x_k, eps = forward_diffuse(b.target, k, b.schedule, rng)
            eps_hat = net(x_k, b.cond, b.future_mask, k, at_step(b.schedule.alpha_bar, k), masks).data
            total += float(((eps_hat - eps) ** 2).mean()) * len(idx)
            count += len(idx)
    return total / count


def fit(net, prepared, cfg, rng=None, epochs=None, steps_per_epoch=None, log_path=None,
        checkpoint_dir=None, on_step=None):
    """Adam training with per-epoch learning-rate decay.

    Writes a JSON-lines log (one line per step plus an epoch summary with the
    k histogram) and per-epoch / best-by-validation checkpoints when paths
    are given. Returns the list of per-step losses.
    """
    rng = rng or T.Rng(cfg.seed, "train")
    epochs = cfg.epochs if epochs is None else epochs
    spe = steps_per_epoch if steps_per_epoch is not None else cfg.steps_per_epoch
    train = prepared.train
    masks = net.mask_stack(prepared.head_masks, prepared.model_panel.shape[0])
    opt = T.Adam(net.parameters(), lr=cfg.lr, decay=cfg.lr_decay)
    n_batches = spe or math.ceil(len(train) / cfg.batch_size)
    losses, best = [], math.inf
    fh = open(log_path, "w") if log_path else None
    try:
        step = 0
        for epoch in range(epochs):
            order = rng.permutation(len(train))
            k_hist = np.zeros(cfg.K, dtype=int)
            epoch_losses = []
            for j in range(n_batches):
                lo = (j * cfg.batch_size) % len(train)
                idx = np.take(order, np.arange(lo, lo + cfg.batch_size), mode="wrap")
                batch = train.batch(idx)
                k = rng.integers(1, cfg.K + 1, size=len(idx))
                np.add.at(k_hist, k - 1, 1)
                opt.zero_grad()
                loss = training_step(net, batch, rng, masks, k=k)
                if not math.isfinite(loss):
                    raise TrainingAborted(f"loss {loss} at epoch {epoch} step {step}")
                opt.step()
                losses.append(loss)
                epoch_losses.append(loss)
                if fh:
                    fh.write(json.dumps({"epoch": epoch, "step": step, "loss": loss, "lr": opt.lr}) + "\n")
                if on_step:
                    on_step(step, loss)
                step += 1
            val_loss = evaluation_loss(net, prepared.val, masks, cfg.seed) if prepared.val is not None else None
            score = val_loss if val_loss is not None else float(np.mean(epoch_losses))
            if fh:
                fh.write(json.dumps({"epoch": epoch, "train_loss": float(np.mean(epoch_losses)),
                                     "val_loss": val_loss, "lr": opt.lr, "k_hist": k_hist.tolist()}) + "\n")
                fh.flush()
            if checkpoint_dir:
                checkpoint_dir = Path(checkpoint_dir)
                checkpoint_dir.mkdir(parents=True, exist_ok=True)
                T.save_checkpoint(checkpoint_dir / f"epoch_{epoch:03d}.ckpt", net.state_dict())
                if score < best:
                    T.save_checkpoint(checkpoint_dir / "best.ckpt", net.state_dict())
            best = min(best, score)
            log.info("epoch %d train %.4f val %s", epoch, np.mean(epoch_losses), val_loss)
            opt.end_epoch()
    finally:
        if fh:
            fh.close()
    return losses


def forecast(net, prepared, wset, n_samples, rng):
    masks = net.mask_stack(prepared.head_masks, prepared.model_panel.shape[0])
    return sample_windows(net, wset.cond, wset.future_mask, wset.schedule, masks, rng, n_samples)


@dataclass
class ForecastSummary:
    days: np.ndarray  # raw-panel index of each window's last observed day
    dates: list
    predicted_return: np.ndarray  # (W, N) next-day close return implied by the point forecast
    realized_return: np.ndarray  # (W, N)
    pred_labels: np.ndarray
    true_labels: np.ndarray
    crps: np.ndarray  # (W, N) on the normalised close channel at the first forecast step


def _next_return(model_values, prepared, cfg):
    """Close-to-close simple return at the first forecast step, from model-space windows (..., N, P, S)."""
    c = prepared.close_idx
    mean = prepared.stats.mean[:, c]
    std = prepared.stats.std[:, c]
    x_next = model_values[..., c, cfg.L] * std + mean
    if cfg.returns:
        return np.expm1(x_next)
    x_last = model_values[..., c, cfg.L - 1] * std + mean
    return x_next / x_last - 1.0


def summarize(prepared, wset, samples, cfg):
    point = point_forecast(samples, axis=1)
    pred_ret = _next_return(point, prepared, cfg)
    true_ret = _next_return(wset.target, prepared, cfg)
    days = wset.starts + cfg.L - 1 + prepared.offset
    last_close = prepared.raw.values[:, prepared.raw.channel(cfg.close), :][:, days].T
    pred_labels = movement_labels(last_close * (1.0 + pred_ret), last_close)
    true_labels = movement_labels(last_close * (1.0 + true_ret), last_close, cfg.dead_zone)
    c = prepared.close_idx
    scores = crps(np.moveaxis(samples[:, :, :, c, cfg.L], 1, -1), wset.target[:, :, c, cfg.L])
    dates = [prepared.raw.timestamps[d] for d in days]
    return ForecastSummary(days, dates, pred_ret, true_ret, pred_labels, true_labels, scores)


def score(prepared, summary, cfg):
    keep = summary.true_labels >= 0
    acc, f1, mcc = movement_metrics(summary.pred_labels[keep], summary.true_labels[keep])
    k = min(cfg.k, summary.predicted_return.shape[1])
    ledger = backtest(summary.predicted_return, summary.realized_return, prepared.raw.symbols, k,
                      cfg.cost_bps, summary.dates, cfg.periods_per_year)
    return metric_report(acc, f1, mcc, float(summary.crps.mean()), ledger), ledger
