"""Experiment configuration: one YAML mapping, validated with named errors.

Scalar keys can be overridden through ``FEDSEQ_``-prefixed environment
variables (e.g. ``FEDSEQ_EPSILON=1.1``), which keeps scripted sweeps simple.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .baselines import MODEL_NAMES
from .federation import OPTIMIZERS, REGIMES
from .seqmf import Hyperparams

MECHANISM_NAMES = ("none", "qharmony", "kharmony", "laplace")


class ValidationError(ValueError):
    """Configuration problem; the message always names the offending key."""


@dataclass(frozen=True)
class SyntheticSpec:
    users: int = 50
    apps: int = 40
    latent_dim: int = 8
    steps_per_user: int = 400

    def __post_init__(self):
        if self.users < 2 or self.apps < 2:
            raise ValidationError("synthetic: users and apps must be >= 2")
        if self.latent_dim < 1 or self.steps_per_user < 1:
            raise ValidationError("synthetic: latent_dim and steps_per_user must be >= 1")


@dataclass
class ExperimentConfig:
    environment: str = "static"
    dataset: str | None = None
    synthetic: SyntheticSpec | None = None
    models: tuple[str, ...] = MODEL_NAMES
    regimes: tuple[str, ...] = ("full", "rare", "global")
    mechanism: str = "none"
    mechanisms: tuple[str, ...] = ("none", "qharmony", "kharmony", "laplace")
    epsilon: float = 4.5
    k: int = 5
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    grid: dict[str, list] | None = None
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "results"
    train_days: int = 6
    val_days: int = 1
    test_days: int = 1
    dedup_window: int = 3
    session_gap: int = 900
    target_active_users: int = 10
    q_update_period: int = 2
    pretrain_rounds: int = 60
    train_rounds: int = 150
    steps_per_update: int = 1
    optimizer: str = "adam"
    participation: float = 1.0

    def echo(self) -> dict:
        """Fully resolved configuration for the manifest and run log."""
        data = asdict(self)
        data["hyperparams"] = asdict(self.hyperparams)
        if self.synthetic is not None:
            data["synthetic"] = asdict(self.synthetic)
        return data


_SCALAR_KEYS = {
    "environment": str,
    "dataset": str,
    "mechanism": str,
    "epsilon": float,
    "k": int,
    "out_dir": str,
    "train_days": int,
    "val_days": int,
    "test_days": int,
    "dedup_window": int,
    "session_gap": int,
    "target_active_users": int,
    "q_update_period": int,
    "pretrain_rounds": int,
    "train_rounds": int,
    "steps_per_update": int,
    "optimizer": str,
    "participation": float,
}

_LIST_KEYS = {"models", "regimes", "mechanisms", "seeds"}
_DICT_KEYS = {"synthetic", "hyperparams", "grid"}
KNOWN_KEYS = set(_SCALAR_KEYS) | _LIST_KEYS | _DICT_KEYS


def _apply_env_overrides(raw: dict) -> dict:
    for key, caster in _SCALAR_KEYS.items():
        value = os.environ.get(f"FEDSEQ_{key.upper()}")
        if value is not None:
            try:
                raw[key] = caster(value)
            except ValueError:
                raise ValidationError(
                    f"{key}: cannot parse environment override {value!r}"
                ) from None
    return raw


def _build_hyperparams(data: dict) -> Hyperparams:
    allowed = {f.name for f in fields(Hyperparams)}
    unknown = set(data) - allowed
    if unknown:
        raise ValidationError(f"hyperparams: unknown keys {sorted(unknown)}")
    try:
        return Hyperparams(**data)
    except ValueError as exc:
        raise ValidationError(f"hyperparams: {exc}") from None


def load_config(path: str | Path) -> ExperimentConfig:
    """Read, override, and validate a configuration file."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file {path} does not exist")
    raw = yaml.safe_load(path.read_text()) or {}
    if not isinstance(raw, dict):
        raise ValidationError("config root must be a mapping")
    return validate_mapping(_apply_env_overrides(raw), base_dir=path.parent)


def validate_mapping(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    unknown = set(raw) - KNOWN_KEYS
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")

    cfg = ExperimentConfig()
    values: dict[str, Any] = {}

    for key, caster in _SCALAR_KEYS.items():
        if key in raw and raw[key] is not None:
            try:
                values[key] = caster(raw[key])
            except (TypeError, ValueError):
                raise ValidationError(f"{key}: expected {caster.__name__}, got {raw[key]!r}")
    for key in _LIST_KEYS:
        if key in raw and raw[key] is not None:
            if not isinstance(raw[key], (list, tuple)):
                raise ValidationError(f"{key}: expected a list")
            values[key] = tuple(raw[key])
    if raw.get("hyperparams") is not None:
        values["hyperparams"] = _build_hyperparams(dict(raw["hyperparams"]))
    if raw.get("synthetic") is not None:
        spec = dict(raw["synthetic"])
        allowed = {f.name for f in fields(SyntheticSpec)}
        unknown = set(spec) - allowed
        if unknown:
            raise ValidationError(f"synthetic: unknown keys {sorted(unknown)}")
        values["synthetic"] = SyntheticSpec(**spec)
    if raw.get("grid") is not None:
        grid = dict(raw["grid"])
        allowed = {f.name for f in fields(Hyperparams)}
        for key, options in grid.items():
            if key not in allowed:
                raise ValidationError(f"grid: unknown hyperparameter {key!r}")
            if not isinstance(options, (list, tuple)) or not options:
                raise ValidationError(f"grid: {key} must list at least one value")
        values["grid"] = grid

    cfg = ExperimentConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(cfg)}, **values})
    _check_ranges(cfg, base_dir)
    return cfg


def _check_ranges(cfg: ExperimentConfig, base_dir: Path | None) -> None:
    if cfg.environment not in ("static", "dynamic"):
        raise ValidationError(f"environment: must be 'static' or 'dynamic', got {cfg.environment!r}")
    if cfg.dataset is None and cfg.synthetic is None:
        raise ValidationError("dataset: either a dataset path or a synthetic block is required")
    if cfg.dataset is not None:
        dataset = Path(cfg.dataset)
        if not dataset.is_absolute() and base_dir is not None:
            dataset = base_dir / dataset
        if not dataset.exists():
            raise ValidationError(f"dataset: path {dataset} does not exist")
        cfg.dataset = str(dataset)
    for model in cfg.models:
        if model not in MODEL_NAMES:
            raise ValidationError(f"models: unknown model {model!r}")
    for regime in cfg.regimes:
        if regime not in REGIMES:
            raise ValidationError(f"regimes: unknown regime {regime!r}")
    if cfg.mechanism not in MECHANISM_NAMES:
        raise ValidationError(f"mechanism: unknown mechanism {cfg.mechanism!r}")
    for name in cfg.mechanisms:
        if name not in MECHANISM_NAMES:
            raise ValidationError(f"mechanisms: unknown mechanism {name!r}")
    if cfg.epsilon <= 0:
        raise ValidationError(f"epsilon: must be > 0, got {cfg.epsilon}")
    if cfg.k < 1:
        raise ValidationError(f"k: must be >= 1, got {cfg.k}")
    if cfg.synthetic is not None:
        budget_cells = cfg.synthetic.apps * cfg.hyperparams.dim
        if cfg.k > budget_cells:
            raise ValidationError(
                f"k: {cfg.k} exceeds the gradient size apps*dim = {budget_cells}"
            )
    if not cfg.seeds:
        raise ValidationError("seeds: need at least one seed")
    if cfg.optimizer not in OPTIMIZERS:
        raise ValidationError(f"optimizer: unknown optimizer {cfg.optimizer!r}")
    if not 0.0 < cfg.participation <= 1.0:
        raise ValidationError(f"participation: must lie in (0, 1], got {cfg.participation}")
    for key in ("train_days", "target_active_users", "q_update_period",
                "train_rounds", "steps_per_update"):
        if getattr(cfg, key) < 1:
            raise ValidationError(f"{key}: must be >= 1, got {getattr(cfg, key)}")
    for key in ("val_days", "test_days", "dedup_window", "session_gap", "pretrain_rounds"):
        if getattr(cfg, key) < 0:
            raise ValidationError(f"{key}: must be >= 0, got {getattr(cfg, key)}")
