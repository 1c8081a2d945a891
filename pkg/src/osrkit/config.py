"""Experiment configuration: TOML file parsing, defaults, CLI overrides,
and a round-trippable writer for the resolved effective config."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, asdict
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

from .train import FINETUNE_LOSSES, PRETRAIN_METHODS, TrainConfig

DATASETS = ("mnist", "fashion_mnist", "cifar10")


@dataclass
class PretrainSection:
    method: str = "dtae"
    epochs: int = 4


@dataclass
class FinetuneSection:
    loss: str = "ce"
    epochs: int = 3


@dataclass
class ExperimentConfig:
    """Full operator-facing configuration; every field has a default so an
    empty config file is valid."""

    dataset: str = "mnist"
    data_dir: str = "data"
    output_dir: str = "runs"
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    batch_size: int = 48
    lr: float = 0.001
    margin: float = 0.2
    contamination: float = 0.01
    num_known: int = 6
    groups: int = 3
    runs_per_group: int = 10
    base_seed: int = 0
    train_limit: int = 3000
    dropout_keep: float = 0.8
    use_batchnorm: bool = True
    jobs: int = 1

    def validate(self):
        if self.dataset not in DATASETS:
            raise ValueError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.pretrain.method not in PRETRAIN_METHODS:
            raise ValueError(f"pretrain.method must be one of {PRETRAIN_METHODS}")
        if self.finetune.loss not in FINETUNE_LOSSES:
            raise ValueError(f"finetune.loss must be one of {FINETUNE_LOSSES}")
        if not 0.0 < self.contamination < 1.0:
            raise ValueError("contamination must be in (0, 1)")
        if not 2 <= self.num_known <= 9:
            raise ValueError("num_known must be in [2, 9]")
        for name in ("batch_size", "groups", "runs_per_group", "jobs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.pretrain.epochs < 1 or self.finetune.epochs < 1:
            raise ValueError("epoch counts must be >= 1")
        return self

    def train_config(self, seed: int, pretrain_method: str | None = None,
                     finetune_loss: str | None = None) -> TrainConfig:
        return TrainConfig(
            pretrain_method=pretrain_method if pretrain_method is not None
            else self.pretrain.method,
            finetune_loss=finetune_loss if finetune_loss is not None
            else self.finetune.loss,
            pretrain_epochs=self.pretrain.epochs,
            finetune_epochs=self.finetune.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            seed=seed,
            margin=self.margin,
            train_limit=self.train_limit,
            dropout_keep=self.dropout_keep,
            use_batchnorm=self.use_batchnorm,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        pre = data.pop("pretrain", {})
        fin = data.pop("finetune", {})
        cfg = cls(**data)
        cfg.pretrain = PretrainSection(**pre) if isinstance(pre, dict) else pre
        cfg.finetune = FinetuneSection(**fin) if isinstance(fin, dict) else fin
        return cfg.validate()


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, "rb") as f:
        return ExperimentConfig.from_dict(_toml.load(f))


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def dump_toml(config: ExperimentConfig) -> str:
    """Serialise to TOML; load_config(dump) reproduces an equal config."""
    data = config.to_dict()
    pre = data.pop("pretrain")
    fin = data.pop("finetune")
    lines = [f"{k} = {_toml_value(v)}" for k, v in data.items()]
    lines.append("")
    lines.append("[pretrain]")
    lines.extend(f"{k} = {_toml_value(v)}" for k, v in pre.items())
    lines.append("")
    lines.append("[finetune]")
    lines.extend(f"{k} = {_toml_value(v)}" for k, v in fin.items())
    return "\n".join(lines) + "\n"


def write_config(path: str | Path, config: ExperimentConfig) -> None:
    Path(path).write_text(dump_toml(config))
