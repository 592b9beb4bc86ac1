"""Config parsing: field-path diagnostics, defaults, and effective-config
round trips."""

from __future__ import annotations

import json

import pytest

from submoe.config import (
    ExperimentConfig, config_from_dict, config_to_dict, load_config,
)
from submoe.errors import ConfigError


def minimal() -> dict:
    return {"stream": [{"task_id": 0, "classes": 3, "samples_per_class": 8}]}


def test_empty_config_uses_defaults():
    cfg = config_from_dict({})
    assert cfg.seed == 0
    assert cfg.model.feature_dim == 32 and cfg.model.adapter_layers == (2, 3)
    assert cfg.schedule.identify_steps == 100 and cfg.schedule.finetune_steps == 100
    assert cfg.optimizer.learning_rate == 0.01 and cfg.optimizer.penalty == 0.01
    assert cfg.contrastive.temperature == 0.07
    assert cfg.task_bank.match_threshold == 10.0
    assert cfg.evaluation.protocol == "id_given" and cfg.evaluation.cil is False
    assert cfg.stream == []


def test_unknown_keys_carry_field_paths():
    with pytest.raises(ConfigError, match=r"config\.bogus"):
        config_from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match=r"model\.width"):
        config_from_dict({"model": {"width": 8}})
    with pytest.raises(ConfigError, match=r"schedule\.steps"):
        config_from_dict({"schedule": {"steps": 5}})
    with pytest.raises(ConfigError, match=r"stream\[0\]\.klasses"):
        config_from_dict({"stream": [{"klasses": 2}]})
    with pytest.raises(ConfigError, match=r"stream\[1\]\.alignment"):
        config_from_dict({"stream": [
            {}, {"alignment": {"mode": "sideways"}},
        ]})


def test_type_errors_carry_field_paths():
    with pytest.raises(ConfigError, match=r"optimizer\.learning_rate"):
        config_from_dict({"optimizer": {"learning_rate": "fast"}})
    with pytest.raises(ConfigError, match=r"evaluation\.cil"):
        config_from_dict({"evaluation": {"cil": "yes"}})
    with pytest.raises(ConfigError, match=r"model\.adapter_layers"):
        config_from_dict({"model": {"adapter_layers": [1, "two"]}})
    with pytest.raises(ConfigError, match=r"seed"):
        config_from_dict({"seed": 1.5})


def test_validation_errors_carry_field_paths():
    with pytest.raises(ConfigError, match=r"optimizer\.penalty"):
        config_from_dict({"optimizer": {"penalty": -0.5}})
    with pytest.raises(ConfigError, match=r"schedule\.prune_threshold"):
        config_from_dict({"schedule": {"prune_threshold": 1.5}})
    with pytest.raises(ConfigError, match=r"model\.adapter_layers"):
        config_from_dict({"model": {"depth": 3, "adapter_layers": [5]}})
    with pytest.raises(ConfigError, match=r"stream\[0\]"):
        config_from_dict({"stream": [{"classes": 1}]})
    with pytest.raises(ConfigError, match=r"evaluation\.protocol"):
        config_from_dict({"evaluation": {"protocol": "oracle"}})


def test_epoch_units_resolve_against_smallest_task():
    raw = {
        "schedule": {"identify_epochs": 3, "batch_size": 10},
        "stream": [
            {"task_id": 0, "classes": 4, "samples_per_class": 10},  # 40 rows
            {"task_id": 1, "classes": 2, "samples_per_class": 15},  # 30 rows
        ],
    }
    cfg = config_from_dict(raw)
    # smallest task has 30 rows -> 3 batches of 10 per epoch
    assert cfg.schedule.identify_steps == 9
    assert cfg.schedule.finetune_steps == 100  # untouched default


def test_epochs_and_steps_are_mutually_exclusive():
    with pytest.raises(ConfigError, match="steps or epochs"):
        config_from_dict({
            "schedule": {"identify_steps": 5, "identify_epochs": 1},
            "stream": minimal()["stream"],
        })
    with pytest.raises(ConfigError, match="need a stream"):
        config_from_dict({"schedule": {"identify_epochs": 2}})


def test_effective_config_round_trip():
    raw = {
        "seed": 7,
        "output_dir": "runs/x",
        "model": {"feature_dim": 16, "depth": 3, "adapter_layers": [1, 2], "rank": 4},
        "schedule": {"identify_steps": 42, "num_candidates": 3, "kl_plateau_stop": 0.01},
        "optimizer": {"learning_rate": 0.3, "penalty": 0.025},
        "contrastive": {"temperature": 0.2},
        "task_bank": {"match_threshold": 5.5, "metric": "euclidean"},
        "evaluation": {"protocol": "id_free", "cil": True},
        "stream": [
            {"task_id": 0, "classes": 3, "samples_per_class": 8},
            {"task_id": 1, "classes": 3, "samples_per_class": 8,
             "alignment": {"mode": "reuse", "source": 0, "perturbation": 0.25}},
        ],
    }
    cfg = config_from_dict(raw)
    effective = config_to_dict(cfg)
    cfg2 = config_from_dict(effective)
    assert cfg2 == cfg
    assert config_to_dict(cfg2) == effective


def test_effective_config_is_json_serialisable_and_complete():
    effective = config_to_dict(config_from_dict(minimal()))
    text = json.dumps(effective)
    back = config_from_dict(json.loads(text))
    assert back.stream[0].classes == 3
    # resolved values are explicit, not implied
    assert effective["schedule"]["identify_steps"] == 100
    assert effective["stream"][0]["noise"] == 0.1


def test_load_config_error_paths(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(bad)
    good = tmp_path / "good.json"
    good.write_text(json.dumps(minimal()))
    cfg = load_config(good)
    assert isinstance(cfg, ExperimentConfig)
    assert cfg.stream[0].samples_per_class == 8


def test_explicit_null_selects_default():
    cfg = config_from_dict({"schedule": {"kl_plateau_stop": None},
                            "task_bank": {"metric": None}})
    assert cfg.schedule.kl_plateau_stop is None
    assert cfg.task_bank.metric == "manhattan"
