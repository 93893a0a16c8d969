import json

import pytest

from sckan.config import SCHEMA_VERSION, ConfigError, RunConfig, from_dict, load


def test_round_trip(tmp_path):
    cfg = RunConfig(seed=4, lambda_div=0.25, fusion_strategy="mlp")
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    assert load(p) == cfg
    assert json.loads(cfg.to_json())["schema_version"] == SCHEMA_VERSION


def test_train_config_mapping():
    tc = RunConfig(tau=0.2, alpha=0.1, lambda_div=0.75, K=4).train_config()
    assert (tc.pccl.tau, tc.pccl.alpha, tc.pccl.lambda_div, tc.K) == (0.2, 0.1, 0.75, 4)


@pytest.mark.parametrize("doc,field", [
    ({"nope": 1}, "nope"),
    ({"steps": 1.5}, "steps"),
    ({"use_ssd": 1}, "use_ssd"),
    ({"schema_version": 2}, "schema_version"),
    ({"eval_model": "both"}, "eval_model"),
    ({"eval_window": 6}, "eval_window"),
    ({"tau": 0}, "tau"),
    ({"data_dir": None}, "data_dir"),
])
def test_rejections_carry_field_path(doc, field):
    with pytest.raises(ConfigError) as e:
        from_dict(doc)
    assert e.value.path == field


def test_window_defaults_to_crop():
    assert RunConfig(crop_size=16).window == 16
    assert RunConfig(crop_size=16, eval_window=24).window == 24
