import dataclasses

import pytest

from ictseg.config import (
    TOY_CONFIG,
    ConfigError,
    TrainConfig,
    build_config,
    config_hash,
    dump_config,
    from_flat,
    load_config,
    parse_assignments,
    read_resolved,
    resolve,
    to_flat,
    write_resolved,
)


def test_defaults():
    cfg = TrainConfig()
    assert cfg.lambda_ema == 0.99
    assert cfg.learning_rate == 1e-5
    assert cfg.total_iters == 2000
    assert cfg.batch_labelled == cfg.batch_unlabelled == 4
    assert cfg.model.architecture == "tiny_unet"
    assert cfg.ramp.shape == "sigmoid_exp"


def test_toy_file_loads():
    cfg = load_config(TOY_CONFIG)
    assert cfg.model.architecture == "tiny_unet" and cfg.model.n_classes == 2
    assert cfg.total_iters == 2000 and cfg.data.label_fraction == 0.1
    assert cfg.batch_labelled == cfg.batch_unlabelled == 4


def test_resolve_defaults():
    cfg = resolve(build_config({"train.total_iters": "1000", "train.seed": "7"}))
    assert cfg.ramp.ramp_iters == 400
    assert cfg.model.init_seed == 7
    explicit = resolve(build_config({"ramp.ramp_iters": "12", "model.init_seed": "3"}))
    assert explicit.ramp.ramp_iters == 12 and explicit.model.init_seed == 3
    assert resolve(build_config({"train.total_iters": "1"})).ramp.ramp_iters == 1


def test_parse_assignments():
    text = ["# comment", "", "ramp.w_max = 2.5   # trailing", "train.seed=4"]
    assert parse_assignments(text) == {"ramp.w_max": "2.5", "train.seed": "4"}
    with pytest.raises(ConfigError, match=":2:"):
        parse_assignments(["a.b = 1", "nonsense"])


@pytest.mark.parametrize(
    "key,value,check",
    [
        ("train.adam_betas", "0.8,0.99", lambda c: c.adam_betas == (0.8, 0.99)),
        ("train.ema_before_step", "false", lambda c: c.ema_before_step is False),
        ("ramp.ramp_iters", "none", lambda c: c.ramp.ramp_iters is None),
        ("mix.mode", "beta", lambda c: c.mix.mode == "beta"),
        ("model.architecture", "resnet50_unet", lambda c: c.model.architecture == "resnet50_unet"),
    ],
)
def test_typed_coercion(key, value, check):
    assert check(build_config({key: value}))


@pytest.mark.parametrize(
    "key,value,fragment",
    [
        ("data.label_fraction", "0", "label_fraction"),
        ("data.label_fraction", "1.5", "label_fraction"),
        ("train.learning_rate", "0", "learning_rate"),
        ("train.lambda_ema", "1.2", "lambda_ema"),
        ("train.total_iters", "0", "total_iters"),
        ("train.seed", "abc", "train.seed"),
        ("mix.mode", "gauss", "mix.mode"),
        ("bogus.key", "1", "bogus.key"),
        ("train.model", "x", "train.model"),
    ],
)
def test_invalid_values_name_the_field(key, value, fragment):
    with pytest.raises(ConfigError, match=fragment.replace(".", r"\.")):
        build_config({key: value})


def test_overrides_beat_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("ramp.w_max = 3\ntrain.seed = 1\n")
    cfg = load_config(path, ["ramp.w_max=0"])
    assert cfg.ramp.w_max == 0.0 and cfg.seed == 1
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.cfg")


def test_flat_round_trip_and_hash():
    cfg = resolve(build_config({"ramp.w_max": "0.3", "train.adam_betas": "0.5,0.9", "mix.mode": "beta"}))
    assert from_flat(to_flat(cfg)) == cfg
    assert config_hash(from_flat(to_flat(cfg))) == config_hash(cfg)
    assert config_hash(dataclasses.replace(cfg, seed=1)) != config_hash(cfg)
    assert len(config_hash(cfg)) == 16


def test_dump_reloads(tmp_path):
    cfg = resolve(build_config({"ramp.w_max": "0.1", "data.n_test": "3"}))
    path = tmp_path / "dump.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_resolved_file(tmp_path):
    cfg = resolve(TrainConfig())
    path = write_resolved(cfg, tmp_path / "config.resolved.json")
    assert read_resolved(path) == cfg
    path.write_text(path.read_text().replace('"train.seed": 0', '"train.seed": 5'))
    with pytest.raises(ConfigError, match="hash"):
        read_resolved(path)
