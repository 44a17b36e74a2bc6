"""INI parsing, validation, presets, and the config hash."""

import dataclasses

import pytest

from auvnode.config import (
    ConfigError,
    apply_preset,
    config_hash,
    default_config,
    load_config,
    load_truth_params,
)


def test_default_config_loads():
    cfg = default_config()
    assert cfg.seed == 1
    assert cfg.dataset.schedule == (100, 200, 400, 800, 1600)
    assert cfg.dataset.delta == 0.01
    assert cfg.train.epochs == 300
    assert cfg.train.seeds == 10
    assert cfg.train.cbb_sigma == (0.5, 1.0)
    assert cfg.train.hybrid_sigma == (0.0, 1.0)
    assert cfg.eval.test_n == 5000
    assert cfg.eval.n_initial_conditions == 5
    assert cfg.truth.X_uu < 0.0 and cfg.truth.k > 0.0


def test_partial_override(tmp_path):
    p = tmp_path / "override.ini"
    p.write_text("[train]\nepochs = 7\n[dataset]\nschedule = 50, 100\n",
                 encoding="utf-8")
    cfg = load_config(p, base=default_config())
    assert cfg.train.epochs == 7
    assert cfg.train.patience == 30        # untouched key keeps its default
    assert cfg.dataset.schedule == (50, 100)
    assert cfg.truth == default_config().truth


def test_unknown_section_and_key_are_named(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[training]\nepochs = 7\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="training"):
        load_config(p, base=default_config())
    p.write_text("[train]\nepoch = 7\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="train.epoch"):
        load_config(p, base=default_config())


def test_truth_params_all_or_nothing(tmp_path):
    p = tmp_path / "partial.ini"
    p.write_text("[truth_params]\nX_uu = -0.3\n", encoding="utf-8")
    with pytest.raises(ValueError, match="missing"):
        load_config(p, base=default_config())
    # without the section and without a base there is nothing to fall back on
    p.write_text("[train]\nepochs = 3\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="truth_params"):
        load_config(p)
    with pytest.raises(ConfigError, match="truth_params"):
        load_truth_params(p)


def test_value_parse_errors_name_the_key(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[train]\nepochs = soon\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="train.epochs"):
        load_config(p, base=default_config())
    p.write_text("[train]\ncbb_sigma = 0.5\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="cbb_sigma"):
        load_config(p, base=default_config())


def test_validation_rules():
    cfg = default_config()
    bad = dataclasses.replace(cfg, dataset=dataclasses.replace(cfg.dataset, schedule=(100, 300)))
    with pytest.raises(ConfigError, match="double"):
        bad.validate()
    bad = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=-1))
    with pytest.raises(ConfigError, match="epochs"):
        bad.validate()
    # zero epochs is legal: training becomes a no-op pass-through
    dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=0)).validate()
    bad = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, lr_batch_decay=0.0))
    with pytest.raises(ConfigError, match="lr_batch_decay"):
        bad.validate()
    bad = dataclasses.replace(
        cfg, excitation=dataclasses.replace(cfg.excitation, thrust_band=(0.5, 0.2)))
    with pytest.raises(ConfigError, match="thrust_band"):
        bad.validate()


def test_presets():
    cfg = default_config()
    small = apply_preset(cfg, "small")
    assert small.dataset.schedule == (50, 100, 200)
    assert small.train.seeds == 3
    assert small.train.epochs == 1000 and small.train.patience == 150
    assert small.eval.test_n == 1000
    # the rest is untouched
    assert small.truth == cfg.truth
    assert small.train.lr == cfg.train.lr
    assert apply_preset(cfg, "full") == cfg
    assert apply_preset(cfg, None) == cfg
    with pytest.raises(ConfigError, match="preset"):
        apply_preset(cfg, "medium")


def test_config_hash_is_stable_and_sensitive():
    a = config_hash(default_config())
    b = config_hash(default_config())
    assert a == b
    cfg = default_config()
    c = config_hash(dataclasses.replace(cfg, seed=2))
    assert c != a
    d = config_hash(dataclasses.replace(
        cfg, train=dataclasses.replace(cfg.train, lr=2e-3)))
    assert d != a
