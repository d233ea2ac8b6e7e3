import pytest

from chronicrl.config import ConfigError, ExperimentConfig, default_config_dict


def test_empty_file_reproduces_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("")
    cfg = ExperimentConfig.load(p)
    assert cfg.data == default_config_dict()
    s = cfg.study_settings("A")
    assert s.seeds == (0, 1, 2, 3, 4) and s.n_train == 2000 and s.n_eval == 1000 and s.beta == 2.5
    assert cfg.study_settings("B").seeds == (0, 1, 2)


def test_no_file_is_defaults():
    assert ExperimentConfig.load(None).data == default_config_dict()


def test_unknown_field_named():
    with pytest.raises(ConfigError, match="train.etta"):
        ExperimentConfig.from_dict({"train": {"etta": 0.1}})


def test_null_value_named():
    with pytest.raises(ConfigError, match="population.train"):
        ExperimentConfig.from_dict({"population": {"train": None}})


def test_overrides_flow_through():
    cfg = ExperimentConfig.from_dict({
        "train": {"eta": 0.1},
        "condition_overrides": {"HTN": {"noise_sd": 2.0}},
        "reward": {"w_c": 3.0},
    })
    assert cfg.train().eta == 0.1
    assert cfg.condition_spec("HTN").noise_sd == 2.0
    assert cfg.reward().w_c == 3.0
    assert cfg.study_settings().condition("HTN").noise_sd == 2.0


def test_bad_override_field():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"condition_overrides": {"HTN": {"not_a_field": 1}}})


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"train": {"gamma": 1.5}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"population": {"train": 0}})


def test_missing_file():
    with pytest.raises(ConfigError):
        ExperimentConfig.load("/nonexistent/c.yaml")


def test_dump_round_trip(tmp_path):
    cfg = ExperimentConfig.from_dict({"seeds": [7]})
    cfg.save(tmp_path / "out.yaml")
    back = ExperimentConfig.load(tmp_path / "out.yaml")
    assert back.data == cfg.data
