"""Versioned run configuration.

A config file is JSON with a ``version`` key and any subset of the sections
below; missing keys take the defaults.  ``routerank --config FILE`` applies
it to every subcommand.
"""

from __future__ import annotations

import json
from dataclasses import asdict, fields, replace

from routerank import audit, nncore, schema
from routerank.candidates import DEFAULT_K, MAX_K
from routerank.model import R4Config
from routerank.synthworld.simulate import SimConfig
from routerank.trainer import TrainConfig

CONFIG_VERSION = "routerank-config/1"


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    return {
        "version": CONFIG_VERSION,
        "network": {"rows": 50, "cols": 50, "corruption_rate": 0.02},
        "simulation": SimConfig().to_dict(),
        "candidates": {"k": DEFAULT_K, "max_k": MAX_K},
        "schema": {
            "min_frequency": schema.MIN_FREQUENCY,
            "history_len": schema.HISTORY_LEN,
            "max_route_links": schema.MAX_ROUTE_LINKS,
            "link_embed_dim": schema.LINK_EMBED_DIM,
            "clip": schema.CLIP,
        },
        "model": R4Config().to_dict(),
        "training": {**asdict(TrainConfig()), "prob_clamp": nncore.PROB_CLAMP},
        "audit": {
            "cosine_bias": audit.COSINE_BIAS,
            "suspicious_fraction": audit.SUSPICIOUS_FRACTION,
            "epochs": audit.SIM_EPOCHS,
            "min_chosen": audit.MIN_CHOSEN,
            "kmeans_max_iter": audit.KMEANS_MAX_ITER,
            "kmeans_tol": audit.KMEANS_TOL,
        },
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        out[k] = _merge(base[k], v, f"{path}{k}.") if isinstance(base[k], dict) and isinstance(v, dict) else v
    return out


def load_config(path=None) -> dict:
    cfg = default_config()
    if path is None:
        return cfg
    try:
        with open(path, encoding="utf-8") as fh:
            override = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if override.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION!r}")
    return _merge(cfg, override)


def sim_config(cfg: dict) -> SimConfig:
    d = dict(cfg["simulation"])
    d["rush_buckets"] = tuple(d["rush_buckets"])
    d["k_candidates"] = cfg["candidates"]["k"]
    return SimConfig(**d)


def train_config(cfg: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in cfg["training"].items() if k in names})


def model_config(cfg: dict, variant: str) -> R4Config:
    """The named variant with the config's base hyperparameters."""
    base = R4Config.from_dict(cfg["model"])
    v = R4Config.variant(variant)
    flags = {f.name: getattr(v, f.name) for f in fields(R4Config) if f.name.startswith("wo_")}
    depth = v.resnet_depth if variant == "R4-C" else base.resnet_depth
    return replace(base, name=variant, resnet_depth=depth, **flags)
