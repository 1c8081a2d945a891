"""Config defaults, TOML round trip, and CLI override resolution."""

import pytest

from osrkit.cli import build_parser, resolve_config
from osrkit.config import (
    ExperimentConfig,
    dump_toml,
    load_config,
    write_config,
)


def test_empty_config_is_valid():
    cfg = ExperimentConfig()
    cfg.validate()
    assert cfg.dataset == "mnist"
    assert cfg.contamination == 0.01
    assert cfg.num_known == 6
    assert cfg.groups == 3 and cfg.runs_per_group == 10


def test_toml_round_trip(tmp_path):
    cfg = ExperimentConfig(dataset="fashion_mnist", batch_size=32, lr=0.002,
                           train_limit=0, use_batchnorm=False)
    cfg.pretrain.method = "rotnet"
    cfg.pretrain.epochs = 5
    path = tmp_path / "cfg.toml"
    write_config(path, cfg)
    loaded = load_config(path)
    assert loaded == cfg


def test_partial_toml_uses_defaults(tmp_path):
    (tmp_path / "cfg.toml").write_text('dataset = "cifar10"\n[finetune]\nloss = "ii"\n')
    cfg = load_config(tmp_path / "cfg.toml")
    assert cfg.dataset == "cifar10"
    assert cfg.finetune.loss == "ii"
    assert cfg.batch_size == ExperimentConfig().batch_size


def test_unknown_keys_rejected():
    with pytest.raises(ValueError, match="unknown config keys"):
        ExperimentConfig.from_dict({"learning_rate": 0.1})


@pytest.mark.parametrize("field, value", [
    ("dataset", "svhn"),
    ("contamination", 1.5),
    ("num_known", 1),
    ("groups", 0),
])
def test_validation_rejects_bad_values(field, value):
    cfg = ExperimentConfig()
    setattr(cfg, field, value)
    with pytest.raises(ValueError):
        cfg.validate()


def test_train_config_conversion():
    cfg = ExperimentConfig(batch_size=32, lr=0.01, margin=0.4, train_limit=100)
    cfg.pretrain.epochs = 7
    tc = cfg.train_config(seed=5, pretrain_method="rotnet", finetune_loss="triplet")
    assert tc.pretrain_method == "rotnet"
    assert tc.finetune_loss == "triplet"
    assert tc.pretrain_epochs == 7
    assert tc.seed == 5
    assert tc.margin == 0.4


def test_cli_overrides_file_values(tmp_path):
    write_config(tmp_path / "cfg.toml", ExperimentConfig(batch_size=64))
    args = build_parser().parse_args([
        "experiment", "--config", str(tmp_path / "cfg.toml"),
        "--dataset", "fashion_mnist", "--pretrain", "rotnet", "--loss", "triplet",
        "--seed", "99", "--batch-size", "16",
    ])
    cfg = resolve_config(args)
    assert cfg.dataset == "fashion_mnist"
    assert cfg.pretrain.method == "rotnet"
    assert cfg.finetune.loss == "triplet"
    assert cfg.base_seed == 99
    assert cfg.batch_size == 16


def test_dump_toml_parses_with_tomllib():
    import sys
    if sys.version_info >= (3, 11):
        import tomllib as toml
    else:
        import tomli as toml
    text = dump_toml(ExperimentConfig())
    parsed = toml.loads(text)
    assert parsed["dataset"] == "mnist"
    assert parsed["pretrain"]["method"] == "dtae"
