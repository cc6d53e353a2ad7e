"""Command-line entry point.

    stockdiff <command> [--config FILE] [--checkpoint PATH] [--<key> VALUE ...]

Commands: gen-data, train, sample, eval, backtest, describe. Every config
key can be overridden with ``--key value``. Exit status is 0 on success, 1
on a runtime failure and 2 on a usage/config error or missing input; errors
go to stderr as a single ``error kind=... detail="..."`` line.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from stockdiff import __version__
from stockdiff import tensor as T
from stockdiff.config import ConfigError, dump_config, load_config
from stockdiff.data import DataError, ingest_csv, synth_market, write_csv
from stockdiff.diffusion import TrainingAborted
from stockdiff.evaluation import write_report, write_trade_log
from stockdiff.noise import export_schedule_csv, export_score_csv, integrated_score
from stockdiff.pipeline import (
    build_net,
    fit,
    forecast,
    prepare,
    score,
    summarize,
    synth_params,
)
from stockdiff.relations import load_relations, save_relations, write_grouping_report

REPORT_DIR_ENV = "STOCKDIFF_REPORT_DIR"
COMMANDS = ("gen-data", "train", "sample", "eval", "backtest", "describe")

log = logging.getLogger("stockdiff")


class UsageError(Exception):
    pass


class MissingInput(Exception):
    def __init__(self, path, what="file"):
        super().__init__(f"{what} not found: {path}")
        self.path = str(path)


def _fail(kind, detail, **extra):
    fields = " ".join(f"{k}={json.dumps(str(v))}" for k, v in extra.items())
    detail = json.dumps(" ".join(str(detail).split()))
    print(f"error kind={kind} detail={detail}" + (f" {fields}" if fields else ""), file=sys.stderr)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse(argv):
    p = _Parser(prog="stockdiff", add_help=True)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("-v", "--verbose", action="store_true")
    args, rest = p.parse_known_args(argv)
    overrides = {}
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        elif i + 1 < len(rest):
            i += 1
            value = rest[i]
        else:
            raise UsageError(f"missing value for {tok}")
        overrides[key] = value
        i += 1
    return args, overrides


# -- paths and manifests -----------------------------------------------

def report_dir(cfg):
    return Path(os.environ.get(REPORT_DIR_ENV) or cfg.run_dir)


def relations_path(cfg):
    p = Path(cfg.relations_file)
    return p if p.is_absolute() else Path(cfg.data_dir) / p


def write_manifest(directory, cfg, command):
    manifest = {
        "command": command,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "code_version": __version__,
        "config": cfg.to_dict(),
    }
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_market(cfg):
    data_dir = Path(cfg.data_dir)
    if not data_dir.is_dir():
        raise MissingInput(data_dir, "data directory")
    rel_path = relations_path(cfg)
    skip = {rel_path.resolve(), (data_dir / "clusters.csv").resolve()}
    files = sorted(p for p in data_dir.glob("*.csv") if p.resolve() not in skip)
    if not files:
        raise MissingInput(data_dir / "*.csv", "symbol CSV")
    if not rel_path.exists():
        raise MissingInput(rel_path, "relations file")
    panel = ingest_csv(files, cfg.indicator_list)
    return panel, load_relations(rel_path, panel.symbols)


def checkpoint_path(cfg, given):
    path = Path(given) if given else report_dir(cfg) / "checkpoints" / "best.ckpt"
    if not path.exists():
        raise MissingInput(path, "checkpoint")
    return path


def load_net(cfg, prepared, path):
    net = build_net(cfg, prepared)
    net.load_state_dict(T.load_checkpoint(path))
    return net


# -- commands ----------------------------------------------------------

def cmd_gen_data(cfg, args):
    out = Path(cfg.data_dir)
    panel, labels, rel = synth_market(cfg.n_stocks, cfg.n_clusters, cfg.length, T.Rng(cfg.seed, "synth"),
                                      synth_params(cfg))
    write_csv(panel, out)
    save_relations(relations_path(cfg), rel, panel.symbols)
    lines = ["symbol,cluster"] + [f"{s},{c}" for s, c in zip(panel.symbols, labels)]
    (out / "clusters.csv").write_text("\n".join(lines) + "\n")
    write_manifest(out, cfg, "gen-data")
    print(json.dumps({"data_dir": str(out), "symbols": len(panel.symbols), "days": panel.n_time}))


def cmd_train(cfg, args):
    panel, rel = load_market(cfg)
    prepared = prepare(cfg, panel, rel)
    out = report_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.ini")
    write_grouping_report(out / "grouping.json", rel, prepared.head_masks)
    close = prepared.model_panel.values[:, prepared.close_idx, : prepared.split.train_end]
    export_score_csv(out / "score.csv", integrated_score(close, prepared.labels, cfg.alpha, cfg.window),
                     panel.symbols)
    last = prepared.train.batch([len(prepared.train) - 1]).schedule
    export_schedule_csv(out / "schedule.csv", type(last)(last.beta[0], last.alpha_bar[0]))
    net = build_net(cfg, prepared)
    losses = fit(net, prepared, cfg, log_path=out / "train_log.jsonl", checkpoint_dir=out / "checkpoints")
    write_manifest(out, cfg, "train")
    print(json.dumps({"run_dir": str(out), "steps": len(losses), "final_loss": losses[-1]}))


def _samples(cfg, args, prepared, out, force=False):
    """Test-window samples, read from samples.npz when it matches this config, else drawn."""
    ckpt = checkpoint_path(cfg, args.checkpoint)
    path = out / "samples.npz"
    if path.exists() and not force:
        with np.load(path) as z:
            if str(z["config_hash"]) == cfg.digest() and np.array_equal(z["starts"], prepared.test.starts):
                return z["samples"]
    net = load_net(cfg, prepared, ckpt)
    samples = forecast(net, prepared, prepared.test, cfg.n_samples, T.Rng(cfg.seed, "sample"))
    out.mkdir(parents=True, exist_ok=True)
    np.savez(path, samples=samples, starts=prepared.test.starts, config_hash=np.array(cfg.digest()))
    return samples


def cmd_sample(cfg, args):
    panel, rel = load_market(cfg)
    prepared = prepare(cfg, panel, rel)
    out = report_dir(cfg)
    samples = _samples(cfg, args, prepared, out, force=True)
    summary = summarize(prepared, prepared.test, samples, cfg)
    per_stock = out / "samples"
    per_stock.mkdir(exist_ok=True)
    c, s = prepared.close_idx, cfg.L
    for i, sym in enumerate(panel.symbols):
        draws = samples[:, :, i, c, s]
        lines = ["date,predicted_return,realized_return," + ",".join(f"s{j}" for j in range(draws.shape[1]))]
        for w, date in enumerate(summary.dates):
            vals = ",".join(f"{v:.10g}" for v in draws[w])
            lines.append(f"{date},{summary.predicted_return[w, i]:.10g},{summary.realized_return[w, i]:.10g},{vals}")
        (per_stock / f"{sym}.csv").write_text("\n".join(lines) + "\n")
    write_manifest(out, cfg, "sample")
    print(json.dumps({"samples": str(out / "samples.npz"), "windows": int(samples.shape[0])}))


def _scored(cfg, args):
    panel, rel = load_market(cfg)
    prepared = prepare(cfg, panel, rel)
    out = report_dir(cfg)
    samples = _samples(cfg, args, prepared, out)
    summary = summarize(prepared, prepared.test, samples, cfg)
    report, ledger = score(prepared, summary, cfg)
    return out, report, ledger


def cmd_eval(cfg, args):
    out, report, _ = _scored(cfg, args)
    write_report(out / "metrics.json", report)
    write_manifest(out, cfg, "eval")
    print(json.dumps(report, sort_keys=True))


def cmd_backtest(cfg, args):
    out, report, ledger = _scored(cfg, args)
    write_trade_log(out / "trades.csv", ledger)
    lines = ["date,portfolio_return"] + [f"{d},{r:.10g}" for d, r in zip(ledger.dates, ledger.daily_returns)]
    (out / "daily_returns.csv").write_text("\n".join(lines) + "\n")
    summary = {"k": ledger.k, "cumulative_return": report["irr"], "sharpe": report["sharpe"],
               "n_days": report["n_days"], "cost_bps": cfg.cost_bps}
    write_report(out / "backtest.json", summary)
    write_manifest(out, cfg, "backtest")
    print(json.dumps(summary, sort_keys=True))


def cmd_describe(cfg, args):
    net = build_net(cfg)
    print(json.dumps({"parameters": net.describe(), "heads": net.cfg.n_heads,
                      "in_channels": net.cfg.in_channels}, indent=2))


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "backtest": cmd_backtest,
    "describe": cmd_describe,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args, overrides = _parse(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config, overrides)
        HANDLERS[args.command](cfg, args)
    except UsageError as exc:
        _fail("usage", exc)
        return 2
    except ConfigError as exc:
        _fail("config", exc, field=exc.field)
        return 2
    except MissingInput as exc:
        _fail("missing_file", exc, path=exc.path)
        return 2
    except FileNotFoundError as exc:
        _fail("missing_file", exc, path=exc.filename or "")
        return 2
    except T.CheckpointError as exc:
        _fail("checkpoint", exc)
        return 1
    except DataError as exc:
        _fail("data", exc)
        return 1
    except TrainingAborted as exc:
        _fail("training", exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort single-line report
        _fail("runtime", f"{type(exc).__name__}: {exc}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
