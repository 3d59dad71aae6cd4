import pytest

from qafnet.config import CONFIG_ENV, DataConfig, RunConfig, load_config
from qafnet.errors import ConfigError


def test_defaults_roundtrip_through_ini():
    cfg = RunConfig()
    back = RunConfig.from_ini(cfg.to_ini())
    assert back == cfg
    assert back.to_ini() == cfg.to_ini()


def test_overrides_roundtrip(tmp_path):
    cfg = RunConfig().with_overrides(**{"seed": 4, "data.n_buses": 3, "model.m": 32, "fed.k_local": 2,
                                        "finetune.patience": 9, "alpha": None})
    assert cfg.seed == 4 and cfg.data.n_buses == 3 and cfg.model["m"] == 32
    assert cfg.alpha == 0.05
    cfg.write(tmp_path / "c.ini")
    assert load_config(tmp_path / "c.ini") == cfg


def test_derived_sections_follow_run_values():
    cfg = RunConfig(seed=5, alpha=0.1, dt_obs=0.2)
    assert cfg.model_config().alpha == 0.1
    assert cfg.fed_config().seed == 5 and cfg.finetune_config().seed == 5
    assert cfg.model_config().t_max_input == pytest.approx(1.5 + 0.333 + 0.2)


def test_partial_ini_keeps_defaults():
    cfg = RunConfig.from_ini("[fed]\ntotal_rounds = 7\n")
    assert cfg.fed["total_rounds"] == 7 and cfg.fed["k_local"] == RunConfig().fed["k_local"]


@pytest.mark.parametrize("text", ["[model]\nwidth = 3\n", "[bogus]\nx = 1\n", "[run]\nseed = abc\n",
                                  "no section header\n", "[run]\ncalibration_mode = loose\n",
                                  "[data]\nn_buses = 1\n"])
def test_bad_ini_is_config_error(text):
    with pytest.raises(ConfigError):
        RunConfig.from_ini(text)


def test_target_split_partitions():
    ft, cal, test = DataConfig().target_split(500)
    assert (len(ft), len(cal), len(test)) == (200, 150, 150)
    assert ft.stop == cal.start and cal.stop == test.start


def test_env_var_selects_config(tmp_path, monkeypatch):
    (tmp_path / "e.ini").write_text("[run]\nseed = 11\n")
    monkeypatch.setenv(CONFIG_ENV, str(tmp_path / "e.ini"))
    assert load_config().seed == 11
    monkeypatch.delenv(CONFIG_ENV)
    assert load_config() == RunConfig()
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
