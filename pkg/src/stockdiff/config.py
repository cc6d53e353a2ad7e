"""Run configuration: sectioned ``key = value`` files plus ``--key value`` overrides."""

from __future__ import annotations

import configparser
import dataclasses
import errno
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class RunConfig:
    # [data]
    data_dir: str = "data"
    relations_file: str = "relations.csv"
    indicators: str = "close,ma5,volume"
    close: str = "close"
    returns: bool = True
    L: int = 16
    horizon: int = 3
    stride: int = 1
    train_frac: float = 0.7
    val_frac: float = 0.1
    train_end_date: str = ""
    val_end_date: str = ""
    cluster_relations: str = ""
    dead_zone: float = 0.0
    # [synth]
    n_stocks: int = 8
    n_clusters: int = 2
    length: int = 400
    momentum: float = 0.9
    factor_weight: float = 0.8
    idio_weight: float = 0.2
    factor_vol: float = 0.015
    idio_vol: float = 0.015
    n_random_relations: int = 1
    random_edge_prob: float = 0.15
    # [model]
    d_model: int = 16
    n_masked_heads: int = 12
    n_unmasked_heads: int = 4
    n_encoder_layers: int = 2
    head_dim: int = 8
    ff_hidden: int = 64
    conv_kernel: int = 2
    dilations: str = "1,2,4,8"
    emb_dim: int = 32
    emb_base: float = 10000.0
    use_relations: bool = True
    aggregate_relations: bool = False
    output_skip: bool = True
    # [diffusion]
    K: int = 100
    beta_base_max: float = 0.2
    gamma: float = 0.5
    alpha: float = 0.5
    window: int = 2
    noise_mode: str = "variance"
    # [train]
    batch_size: int = 16
    lr: float = 1e-4
    lr_decay: float = 0.95
    epochs: int = 100
    steps_per_epoch: int = 0
    seed: int = 0
    # [eval]
    n_samples: int = 16
    k: int = 5
    cost_bps: float = 0.0
    periods_per_year: int = 252
    # [paths]
    run_dir: str = "runs/default"

    @property
    def indicator_list(self):
        return [s.strip() for s in self.indicators.split(",") if s.strip()]

    @property
    def dilation_tuple(self):
        return tuple(int(s) for s in self.dilations.split(",") if s.strip())

    @property
    def seq_len(self):
        return self.L + self.horizon

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


SECTIONS = {
    "data": ["data_dir", "relations_file", "indicators", "close", "returns", "L", "horizon", "stride",
             "train_frac", "val_frac", "train_end_date", "val_end_date", "cluster_relations", "dead_zone"],
    "synth": ["n_stocks", "n_clusters", "length", "momentum", "factor_weight", "idio_weight",
              "factor_vol", "idio_vol", "n_random_relations", "random_edge_prob"],
    "model": ["d_model", "n_masked_heads", "n_unmasked_heads", "n_encoder_layers", "head_dim", "ff_hidden",
              "conv_kernel", "dilations", "emb_dim", "emb_base", "use_relations", "aggregate_relations",
              "output_skip"],
    "diffusion": ["K", "beta_base_max", "gamma", "alpha", "window", "noise_mode"],
    "train": ["batch_size", "lr", "lr_decay", "epochs", "steps_per_epoch", "seed"],
    "eval": ["n_samples", "k", "cost_bps", "periods_per_year"],
    "paths": ["run_dir"],
}

_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, raw):
    kind = _TYPES[key]
    raw = str(raw).strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind}") from None
    return raw


def apply_overrides(cfg, overrides):
    values = cfg.to_dict()
    for key, raw in overrides.items():
        key = key.replace("-", "_")
        if key not in _TYPES:
            raise ConfigError(key, "unknown configuration key")
        values[key] = _coerce(key, raw)
    return RunConfig(**values)


def load_config(path=None, overrides=None):
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(errno.ENOENT, "config file not found", str(path))
        parser = configparser.ConfigParser()
        parser.optionxform = str
        parser.read(path)
        found = {}
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(section, "unknown config section")
            for key, raw in parser.items(section):
                if key not in SECTIONS[section]:
                    raise ConfigError(key, f"not a key of section [{section}]")
                found[key] = raw
        cfg = apply_overrides(cfg, found)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    validate(cfg)
    return cfg


def dump_config(cfg, path):
    parser = configparser.ConfigParser()
    parser.optionxform = str
    values = cfg.to_dict()
    for section, keys in SECTIONS.items():
        parser[section] = {k: str(values[k]) for k in keys}
    with Path(path).open("w") as fh:
        parser.write(fh)


def validate(cfg):
    def need(ok, key, msg):
        if not ok:
            raise ConfigError(key, msg)

    need(cfg.L >= 1, "L", "must be >= 1")
    need(cfg.horizon >= 1, "horizon", "must be >= 1")
    need(cfg.stride >= 1, "stride", "must be >= 1")
    need(0 < cfg.train_frac < 1, "train_frac", "must lie in (0, 1)")
    need(0 <= cfg.val_frac < 1 - cfg.train_frac, "val_frac", "train_frac + val_frac must be < 1")
    need(cfg.close in cfg.indicator_list, "close", "must be one of the indicators")
    need(cfg.dead_zone >= 0, "dead_zone", "must be >= 0")
    need(cfg.n_stocks >= cfg.n_clusters >= 1, "n_clusters", "need n_stocks >= n_clusters >= 1")
    need(cfg.length >= 2, "length", "must be >= 2")
    need(-1 < cfg.momentum < 1, "momentum", "must lie in (-1, 1)")
    need(cfg.d_model >= 1, "d_model", "must be >= 1")
    need(0 <= cfg.n_masked_heads <= 12, "n_masked_heads", "must lie in [0, 12]")
    need(cfg.n_unmasked_heads >= 0, "n_unmasked_heads", "must be >= 0")
    need(cfg.emb_dim % 2 == 0 and cfg.emb_dim > 0, "emb_dim", "must be a positive even number")
    dil = cfg.dilation_tuple
    need(bool(dil) and dil[0] == 1 and all(b == 2 * a for a, b in zip(dil, dil[1:])),
         "dilations", "must be 1,2,4,... (strictly increasing powers of 2)")
    need(cfg.K >= 1, "K", "must be >= 1")
    need(0 < cfg.beta_base_max < 1, "beta_base_max", "must lie in (0, 1)")
    need(0 <= cfg.gamma <= 1, "gamma", "must lie in [0, 1]")
    need(0 <= cfg.alpha <= 1, "alpha", "must lie in [0, 1]")
    need(cfg.window >= 1, "window", "must be >= 1")
    need(cfg.noise_mode in ("variance", "loss_weight"), "noise_mode", "must be 'variance' or 'loss_weight'")
    need(cfg.batch_size >= 1, "batch_size", "must be >= 1")
    need(cfg.lr > 0, "lr", "must be > 0")
    need(0 < cfg.lr_decay <= 1, "lr_decay", "must lie in (0, 1]")
    need(cfg.epochs >= 1, "epochs", "must be >= 1")
    need(cfg.steps_per_epoch >= 0, "steps_per_epoch", "must be >= 0")
    need(cfg.n_samples >= 1, "n_samples", "must be >= 1")
    need(cfg.k >= 1, "k", "must be >= 1")
    need(cfg.cost_bps >= 0, "cost_bps", "must be >= 0")
    return cfg
