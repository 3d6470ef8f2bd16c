"""Config file parsing: one YAML file describes a run or a sweep plan.

Parsing is strict: unknown keys are rejected with the offending section and
key named. ``config_to_dict``/``config_from_dict`` round-trip, so a config
can be regenerated from a parsed one byte-for-byte stable.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import yaml

from .corpus import CorpusSpec
from .potentials import PotentialSpec
from .training import (
    BalanceConfig,
    ModelConfig,
    OptimizerConfig,
    TrainConfig,
)

__all__ = [
    "ConfigError",
    "parse_config",
    "config_from_dict",
    "config_to_dict",
    "plan_from_dict",
]


class ConfigError(ValueError):
    """Malformed config file or out-of-range value."""


_SECTIONS = {
    "model": ("layers", "experts", "top_k", "dim", "ffn_dim"),
    "balance": ("mechanism", "phi", "eta", "alpha", "statistic", "bias_step"),
    "optimizer": (
        "kind",
        "lr",
        "beta1",
        "beta2",
        "eps",
        "weight_decay",
        "warmup_steps",
        "cosine",
    ),
    "corpus": ("domains", "mixture", "cluster_scale", "label_rule", "seed", "centers"),
    "train": ("batch_tokens", "steps", "eval_every", "eval_tokens", "seed", "load_window"),
}

_SWEEP_KEYS = ("axis", "values", "seeds")
_AXES = ("phi", "eta", "batch", "mechanism", "statistic")


def _check_keys(section: str, data: dict, allowed: tuple[str, ...]) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a mapping, got {type(data).__name__}")
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in section {section!r}")


def config_from_dict(raw: dict) -> TrainConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    for section in raw:
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section {section!r}")
    for section, allowed in _SECTIONS.items():
        _check_keys(section, raw.get(section, {}), allowed)

    try:
        model_raw = dict(raw.get("model", {}))
        model = ModelConfig(**model_raw)

        balance_raw = dict(raw.get("balance", {}))
        if "phi" in balance_raw and balance_raw["phi"] is not None:
            # Validate the token eagerly so a bad potential fails at parse time.
            PotentialSpec.parse(balance_raw["phi"])
        balance = BalanceConfig(**balance_raw)

        optimizer = OptimizerConfig(**dict(raw.get("optimizer", {})))

        corpus_raw = dict(raw.get("corpus", {}))
        if "domains" in corpus_raw:
            corpus_raw["n_domains"] = corpus_raw.pop("domains")
        if "mixture" in corpus_raw and corpus_raw["mixture"] is not None:
            corpus_raw["mixture"] = tuple(float(w) for w in corpus_raw["mixture"])
        if "centers" in corpus_raw and corpus_raw["centers"] is not None:
            corpus_raw["centers"] = tuple(
                tuple(float(v) for v in row) for row in corpus_raw["centers"]
            )
        corpus = CorpusSpec(dim=model.dim, **corpus_raw)

        train_raw = dict(raw.get("train", {}))
        return TrainConfig(
            model=model, balance=balance, optimizer=optimizer, corpus=corpus, **train_raw
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(cfg: TrainConfig) -> dict:
    """Inverse of config_from_dict (drops derived fields like corpus dim)."""
    out = {
        "model": {
            "layers": cfg.model.layers,
            "experts": cfg.model.experts,
            "top_k": cfg.model.top_k,
            "dim": cfg.model.dim,
            "ffn_dim": cfg.model.ffn_dim,
        },
        "balance": {
            "mechanism": cfg.balance.mechanism,
            "phi": cfg.balance.phi,
            "eta": cfg.balance.eta,
            "alpha": cfg.balance.alpha,
            "statistic": cfg.balance.statistic,
            "bias_step": cfg.balance.bias_step,
        },
        "optimizer": {
            "kind": cfg.optimizer.kind,
            "lr": cfg.optimizer.lr,
            "beta1": cfg.optimizer.beta1,
            "beta2": cfg.optimizer.beta2,
            "eps": cfg.optimizer.eps,
            "weight_decay": cfg.optimizer.weight_decay,
            "warmup_steps": cfg.optimizer.warmup_steps,
            "cosine": cfg.optimizer.cosine,
        },
        "corpus": {
            "domains": cfg.corpus.n_domains,
            "mixture": list(cfg.corpus.mixture),
            "cluster_scale": cfg.corpus.cluster_scale,
            "label_rule": cfg.corpus.label_rule,
            "seed": cfg.corpus.seed,
        },
        "train": {
            "batch_tokens": cfg.batch_tokens,
            "steps": cfg.steps,
            "eval_every": cfg.eval_every,
            "eval_tokens": cfg.eval_tokens,
            "seed": cfg.seed,
            "load_window": cfg.load_window,
        },
    }
    if cfg.corpus.centers is not None:
        out["corpus"]["centers"] = [list(row) for row in cfg.corpus.centers]
    return out


def plan_from_dict(raw: dict):
    """Parse a sweep plan: a 'sweep' section plus a base run config."""
    from .experiments import ExperimentPlan  # local import, avoids a cycle

    raw = dict(raw)
    sweep = raw.pop("sweep")
    _check_keys("sweep", sweep, _SWEEP_KEYS)
    axis = sweep.get("axis")
    if axis not in _AXES:
        raise ConfigError(f"sweep axis must be one of {_AXES}, got {axis!r}")
    values = sweep.get("values")
    if not values:
        raise ConfigError("sweep values must be a non-empty list")
    seeds = sweep.get("seeds", [0])
    if not seeds:
        raise ConfigError("sweep seeds must be a non-empty list")
    base = config_from_dict(raw)
    return ExperimentPlan(
        base=base,
        axis=axis,
        values=tuple(values),
        seeds=tuple(int(s) for s in seeds),
    )


def parse_config(path):
    """Load a run config or sweep plan from a YAML file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if raw is None:
        raw = {}
    if "sweep" in raw:
        return plan_from_dict(raw)
    return config_from_dict(raw)


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    """A copy of the config with both the parameter and corpus seeds set."""
    return replace(cfg, seed=seed, corpus=replace(cfg.corpus, seed=seed))
