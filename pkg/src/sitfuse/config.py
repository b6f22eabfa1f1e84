"""Experiment configuration: one JSON document drives every command.

A config file only needs the keys it wants to change; everything else comes
from the desk defaults below. Command lines may patch single values with
dotted paths (--set train.iterations=500). Every artifact embeds the digest
of the fully resolved config so outputs can be traced to their settings.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .evaluation import EvalConfig
from .gridworld import GenParams
from .percept import BankConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Bad configuration or command usage; maps to exit code 2."""


@dataclass(frozen=True)
class SuiteConfig:
    n_train: int = 16
    n_test: int = 8


@dataclass(frozen=True)
class ModelConfig:
    scheme: str
    lam_lbl: float = 0.0
    lam_aff: float = 0.0
    lbl_variant: str = "batch_mean"
    joint_backprop: bool = False


def default_models() -> dict[str, ModelConfig]:
    """The comparison line-up: plain schemes plus regularized fusion variants."""
    return {
        "blackbox": ModelConfig("blackbox"),
        "concat": ModelConfig("concat"),
        "feature_fusion": ModelConfig("feature_fusion"),
        "feature_fusion_lbl": ModelConfig("feature_fusion", lam_lbl=0.1),
        "feature_fusion_aff": ModelConfig("feature_fusion", lam_aff=0.1),
        "feature_fusion_both": ModelConfig("feature_fusion", lam_lbl=0.1, lam_aff=0.1),
        "action_fusion": ModelConfig("action_fusion"),
        "action_fusion_lbl": ModelConfig("action_fusion", lam_lbl=0.1),
        "action_fusion_aff": ModelConfig("action_fusion", lam_aff=0.1),
        "action_fusion_both": ModelConfig("action_fusion", lam_lbl=0.1, lam_aff=0.1),
    }


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/desk"
    dataset_per_env: int = 256
    affinity_samples: int = 1200
    affinity_file: str | None = None   # supplied matrix overrides estimation
    analytics_samples: int = 800
    env: GenParams = field(default_factory=GenParams)
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=lambda: EvalConfig(
        episodes_per_task=64, max_steps=39, goal_radius=1, d_min=3, d_max=12))
    models: dict[str, ModelConfig] = field(default_factory=default_models)

    def validate(self) -> None:
        self.env.validate()
        if self.suite.n_train < 1 or self.suite.n_test < 1:
            raise ConfigError("suite needs at least one train and one test env")
        for name, model in self.models.items():
            if model.scheme not in ("blackbox", "concat", "feature_fusion",
                                    "action_fusion"):
                raise ConfigError(f"model {name!r} has unknown scheme "
                                  f"{model.scheme!r}")
            if model.scheme in ("blackbox", "concat") and (
                    model.lam_lbl or model.lam_aff):
                raise ConfigError(f"model {name!r} is gateless; regularizer "
                                  "weights must be 0")


def to_dict(cfg: ExperimentConfig) -> dict:
    doc = dataclasses.asdict(cfg)
    doc["models"] = {k: dataclasses.asdict(v) for k, v in cfg.models.items()}
    return doc


_LEAF_DICTS = ("noise_overrides",)  # free-form keys, replaced wholesale


def _deep_merge(base: dict, patch: dict, path: str = "") -> dict:
    out = dict(base)
    for key, value in patch.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key not in _LEAF_DICTS:
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = _deep_merge(base[key], value, where)
        else:
            out[key] = value
    return out


def _merge_models(base: dict, patch: dict) -> dict:
    out = {k: dict(v) for k, v in base.items()}
    for name, body in patch.items():
        if not isinstance(body, dict):
            raise ConfigError(f"models.{name} must be a mapping")
        if name in out:
            out[name] = _deep_merge(out[name], body, f"models.{name}")
        else:
            if "scheme" not in body:
                raise ConfigError(f"new model {name!r} needs a scheme")
            out[name] = dict(dataclasses.asdict(ModelConfig("blackbox")), **body)
    return out


def from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc)
    base = to_dict(ExperimentConfig())
    models_patch = doc.pop("models", {})
    merged = _deep_merge(base, doc)
    merged["models"] = _merge_models(base["models"], models_patch)
    try:
        cfg = ExperimentConfig(
            seed=int(merged["seed"]),
            out=str(merged["out"]),
            dataset_per_env=int(merged["dataset_per_env"]),
            affinity_samples=int(merged["affinity_samples"]),
            affinity_file=merged["affinity_file"],
            analytics_samples=int(merged["analytics_samples"]),
            env=GenParams(**merged["env"]),
            suite=SuiteConfig(**merged["suite"]),
            bank=BankConfig(**merged["bank"]),
            train=TrainConfig(**{**merged["train"], "decay_milestones":
                                 tuple(merged["train"]["decay_milestones"])}),
            eval=EvalConfig(**merged["eval"]),
            models={k: ModelConfig(**v) for k, v in merged["models"].items()},
        )
    except TypeError as exc:
        raise ConfigError(f"bad config structure: {exc}")
    cfg.validate()
    return cfg


def load_config(path: str | Path | None, overrides: list[str] | None = None,
                seed: int | None = None, out: str | None = None
                ) -> ExperimentConfig:
    doc: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}")
    merged = to_dict(from_dict(doc))
    for item in overrides or []:
        merged = apply_override(merged, item)
    if seed is not None:
        merged["seed"] = seed
        merged["train"]["seed"] = seed
        merged["eval"]["seed"] = seed
    if out is not None:
        merged["out"] = out
    return from_dict(merged)


def apply_override(doc: dict, item: str) -> dict:
    """--set dotted.path=value; values parse as JSON, falling back to string."""
    if "=" not in item:
        raise ConfigError(f"--set needs key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    out = json.loads(json.dumps(doc))  # deep copy
    node = out
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config path {key!r}")
        node = node[part]
    leaf = parts[-1]
    if leaf not in node and parts[0] != "models":
        raise ConfigError(f"unknown config key {key!r}")
    node[leaf] = value
    return out


def config_digest(cfg: ExperimentConfig) -> str:
    doc = to_dict(cfg)
    doc.pop("out")  # a location, not an experiment setting
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:12]
