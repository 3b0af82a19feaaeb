import json

import pytest

from copulasmm.config import Config, config_from_dict, load_config
from copulasmm.errors import ConfigError
from copulasmm.pipeline import build_specs, margin_model_for, with_overrides


def test_defaults_are_complete():
    cfg = load_config(None, environ={})
    assert cfg.estimation.S == 25 and cfg.estimation.B == 500
    assert cfg.moments.taus == [0.15, 0.25, 0.35, 0.65, 0.75, 0.85]
    assert cfg.output_dir == "results"
    assert cfg.factor_source.innovations == "skewt"
    assert set(cfg.to_dict()) >= {"data", "margins", "copula", "moments", "estimation", "montecarlo"}


def test_partial_file_fills_defaults(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"estimation": {"S": 10}, "workers": 3}), encoding="utf-8")
    cfg = load_config(str(path), environ={})
    assert cfg.estimation.S == 10
    assert cfg.estimation.B == 500
    assert cfg.workers == 3


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError):
        config_from_dict({"estimation": {"iterations": 5}})
    with pytest.raises(ConfigError):
        config_from_dict({"plotting": {}})


def test_section_must_be_object():
    with pytest.raises(ConfigError):
        config_from_dict({"estimation": [1, 2]})


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "nope.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(str(bad))


def test_environment_overrides_output_and_workers(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"output_dir": "from_file"}), encoding="utf-8")
    cfg = load_config(str(path), environ={"COPULASMM_OUTPUT_DIR": "from_env", "COPULASMM_WORKERS": "4"})
    assert cfg.output_dir == "from_env" and cfg.workers == 4
    with pytest.raises(ConfigError):
        load_config(str(path), environ={"COPULASMM_WORKERS": "many"})


def test_command_line_overrides_win():
    cfg = load_config(None, environ={"COPULASMM_OUTPUT_DIR": "from_env"})
    cfg = with_overrides(cfg, output_dir="from_flag", workers=2, seed=99)
    assert cfg.output_dir == "from_flag" and cfg.workers == 2
    assert cfg.estimation.seed == 99 and cfg.montecarlo.seed == 99
    with pytest.raises(ConfigError):
        with_overrides(Config(), workers=0)


@pytest.mark.parametrize("data", [
    {"factor_source": {"lag": -1}},
    {"factor_source": {"innovations": "student"}},
    {"workers": 0},
    {"copula": {"bounds": {"alpha[1,1]": [1.0, 0.0]}}},
    {"estimation": {"B": 1}},
    {"debug_level": "LOUD"},
])
def test_validation(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_group_labels_follow_first_appearance():
    cfg = config_from_dict({"copula": {"groups": {"a": "metals", "b": "stocks", "c": "metals", "d": "stocks"}}})
    spec, moment_spec = build_specs(cfg, ["b", "a", "c", "d"], p_beta=0)
    assert spec.groups == (0, 1, 1, 0)
    assert moment_spec.groups == spec.groups


def test_groups_must_cover_columns():
    cfg = config_from_dict({"copula": {"groups": {"a": 1, "b": 1}}})
    with pytest.raises(ConfigError):
        build_specs(cfg, ["a", "b", "c"], p_beta=0)


def test_ties_must_reference_existing_slots():
    cfg = config_from_dict({"copula": {"ties": {"zeta_eps": "zeta_f2"}}})
    with pytest.raises(ConfigError):
        build_specs(cfg, ["a", "b"], p_beta=0)


def test_margin_overrides():
    cfg = config_from_dict({"margins": {"overrides": {"gold": {"variance": "gjrx", "mean": "ar1x"}}}})
    model = margin_model_for(cfg, "gold")
    assert model.var_spec == "gjrx" and model.mean_spec == "ar1x"
    assert margin_model_for(cfg, "silver").var_spec == "garch"
    bad = config_from_dict({"margins": {"overrides": {"gold": {"skew": "yes"}}}})
    with pytest.raises(ConfigError):
        margin_model_for(bad, "gold")
