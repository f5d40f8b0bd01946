from __future__ import annotations

from dataclasses import replace

import pytest

from app.config import Dims, EvalConfig, TCWeights, TrainConfig, load_config, parse_override, read_table
from app.errors import ConfigError
from app.quantizer import QuantConfig


def test_defaults():
    config = TrainConfig()
    assert (config.batch_size, config.warmup_steps, config.total_steps) == (64, 100, 2000)
    assert config.dims == Dims()
    assert config.quant == QuantConfig()
    assert config.eval.rho == 0.1


def test_dict_round_trip():
    config = TrainConfig(dims=Dims(M=4, d=8, n_heads=2), tc=TCWeights(lambda_tc=0.5), learning_rate=3e-4)
    assert TrainConfig.from_dict(config.to_dict()) == config


def test_unknown_schema_version():
    data = TrainConfig().to_dict()
    data["schema_version"] = 7
    with pytest.raises(ConfigError):
        TrainConfig.from_dict(data)


@pytest.mark.parametrize(
    "changes",
    [
        {"learning_rate": 0.0},
        {"warmup_steps": 3000},
        {"precision": "float16"},
        {"fm_reduction": "max"},
        {"raw_branch_mode": "both"},
        {"tau_min": 0.5, "tau_max": 0.5},
        {"quantization_enabled": False},
        {"lr_floor": 1.0},
    ],
)
def test_invalid_train_values(changes):
    with pytest.raises(ConfigError):
        replace(TrainConfig(), **changes)


def test_quantization_off_requires_dual_branch_off():
    config = replace(TrainConfig(), quantization_enabled=False, dual_branch_enabled=False)
    assert not config.dual_branch_enabled


@pytest.mark.parametrize("dims", [{"T": 2}, {"d": 10, "n_heads": 4}, {"M": 0}])
def test_invalid_dims(dims):
    with pytest.raises(ConfigError):
        Dims(**dims)


def test_invalid_nested_values():
    with pytest.raises(ConfigError):
        TCWeights(lambda1=-1.0)
    with pytest.raises(ConfigError):
        EvalConfig(flow_steps=0)


def test_with_data_dims_keeps_model_sizes():
    config = TrainConfig().with_data_dims(M=4, d=8, T=5, D=3)
    assert (config.dims.M, config.dims.d, config.dims.T, config.dims.D) == (4, 8, 5, 3)
    assert config.dims.d_ff == Dims().d_ff


def test_parse_override():
    assert parse_override("quant.bits=4") == ("quant", "bits", 4)
    assert parse_override("learning_rate=1e-4") == ("train", "learning_rate", 1e-4)
    assert parse_override("train.raw_branch_mode=bypass_quant") == ("train", "raw_branch_mode", "bypass_quant")
    assert parse_override("adaptive_ste_enabled=false") == ("train", "adaptive_ste_enabled", False)
    with pytest.raises(ConfigError):
        parse_override("no-equals-sign")


def test_load_config_layers_preset_file_and_overrides(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(
        "[train]\nbatch_size = 16\nlearning_rate = 5e-4\n\n[quant]\nbits = 4\n\n[task]\nn_tasks = 3\n",
        encoding="utf-8",
    )
    config = load_config(path, ["quant.bits=6", "tc.lambda_tc=0.0"])
    assert config.batch_size == 16
    assert config.learning_rate == 5e-4
    assert config.quant.bits == 6
    assert config.tc.lambda_tc == 0.0
    assert read_table(path, "task") == {"n_tasks": 3}
    assert read_table(path, "missing") == {}
    assert read_table(None, "task") == {}


def test_reported_preset():
    config = load_config(preset="reported")
    assert config.learning_rate == 2.5e-5
    assert config.quant.bits == 8


@pytest.mark.parametrize("overrides", [["train.batch_sz=3"], ["optim.lr=1"], ["dims.d=7"]])
def test_load_config_rejects_bad_overrides(overrides):
    with pytest.raises(ConfigError):
        load_config(None, overrides)


def test_load_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    broken = tmp_path / "broken.toml"
    broken.write_text("[train\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(broken)
    with pytest.raises(ConfigError):
        load_config(preset="huge")
