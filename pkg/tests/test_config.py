import pytest
import yaml

from cofinetune.config import ExperimentConfig, dump_config, load_config, parse_config, with_overrides
from cofinetune.errors import ConfigError

BASE = {"mode": "cofinetune", "datasets": ["det", "cls"], "data": {"synthetic_seed": 0}}


def test_defaults():
    cfg = parse_config(BASE)
    assert cfg.schedule.base_lr == 0.2 and cfg.schedule.warmup_epochs == 2.5 and cfg.schedule.total_epochs == 15
    assert cfg.augment.scale_jitter_range == (0.65, 1.1) and cfg.augment.box_jitter_ratio == 0.15
    assert cfg.loss.label_smoothing == 0.1 and cfg.model.stochastic_depth_rate == 0.2
    assert cfg.evaluation.head_threshold == 10_000 and cfg.evaluation.tail_threshold == 1_000
    assert cfg.momentum == 0.9 and cfg.strategy == "weighted" and cfg.clip_norm is None
    assert cfg.training_datasets() == ("det", "cls")


def test_roundtrip(tmp_path):
    cfg = parse_config({**BASE, "data": {"synthetic": {"num_classes": 6, "classification": [{"name": "cls",
                                                                                             "size": 9}]}},
                        "clip_norm": 1.0})
    dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg


@pytest.mark.parametrize("raw, field", [
    ({**BASE, "colour": 1}, "colour"),
    ({**BASE, "schedule": {"base_lr": 0.1, "warmup": 2}}, "schedule"),
    ({**BASE, "schedule": {"warmup_epochs": 20}}, "schedule.warmup_epochs"),
    ({**BASE, "model": {"hidden_dim": "big"}}, "model"),
    ({**BASE, "mode": "joint"}, "mode"),
    ({**BASE, "strategy": "mixed"}, "strategy"),
    ({**BASE, "datasets": []}, "datasets"),
    ({**BASE, "datasets": ["det", "det"]}, "datasets"),
    ({**BASE, "data": {}}, "data"),
    ({**BASE, "data": {"synthetic": {"num_classes": 0}}}, "data.synthetic.num_classes"),
    ({"mode": "sequential", "data": {"synthetic_seed": 0}}, "stages"),
    ({"mode": "sequential", "data": {"synthetic_seed": 0}, "stages": [{"dataset": "cls", "epochs": 1}]},
     "stages[0]"),
    ({**BASE, "clip_norm": 0}, "clip_norm"),
    ({**BASE, "evaluation": {"head_threshold": 5, "tail_threshold": 10}}, "evaluation.head_threshold"),
])
def test_validation_errors_carry_field_paths(raw, field):
    with pytest.raises(ConfigError) as info:
        parse_config(raw)
    assert info.value.field is not None and info.value.field.startswith(field)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("mode: [unclosed\n")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(tmp_path / "bad.yaml")


def test_sequential_training_datasets_and_overrides():
    cfg = parse_config({"mode": "sequential", "data": {"synthetic_seed": 0},
                        "stages": [{"dataset": "cls", "epochs": 5}, {"dataset": "det", "epochs": 8},
                                   {"dataset": "cls", "epochs": 4}]})
    assert cfg.training_datasets() == ("cls", "det")
    assert with_overrides(cfg, seed=4).seed == 4
    with pytest.raises(ConfigError):
        with_overrides(cfg, batch_size=0)
    assert isinstance(yaml.safe_dump(cfg.to_dict()), str)
    assert ExperimentConfig().mode == "cofinetune"
