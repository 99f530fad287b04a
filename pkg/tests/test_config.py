"""Configuration tree: validation, serialization, fingerprints, env loading."""

import dataclasses
import json

import pytest

from voxelgrounder.config import (
    ENV_VAR,
    STAGE_TRAINABLES,
    Config,
    DataConfig,
    LossWeights,
    StageConfig,
    load_config,
)
from voxelgrounder.errors import ConfigError


# --- stage schedule --------------------------------------------------------


def test_stage_trainable_groups_grow_monotonically():
    assert STAGE_TRAINABLES[1] == ("projector",)
    assert set(STAGE_TRAINABLES[1]) < set(STAGE_TRAINABLES[2]) < set(STAGE_TRAINABLES[3])
    assert "seg_decoder" in STAGE_TRAINABLES[3]
    assert "seg_decoder" not in STAGE_TRAINABLES[2]
    assert "lm_base" not in STAGE_TRAINABLES[3]  # the base LM never unfreezes


def test_stage_config_rejects_unknown_stage():
    with pytest.raises(ConfigError):
        StageConfig(stage=0)
    with pytest.raises(ConfigError):
        StageConfig(stage=4)


def test_stage_config_default_mixes_are_normalized():
    for stage in (1, 2, 3):
        sc = StageConfig(stage=stage)
        assert abs(sum(p for _, p in sc.task_mix) - 1.0) < 1e-9
        assert all(p >= 0 for _, p in sc.task_mix)


def test_stage_config_seg_tasks_only_in_stage3():
    mix = [("report", 0.5), ("semantic_seg", 0.5)]
    StageConfig(stage=3, task_mix=mix)
    for stage in (1, 2):
        with pytest.raises(ConfigError):
            StageConfig(stage=stage, task_mix=mix)


def test_stage_config_rejects_bad_mixes():
    with pytest.raises(ConfigError):
        StageConfig(stage=1, task_mix=[("report", 0.7)])  # does not sum to 1
    with pytest.raises(ConfigError):
        StageConfig(stage=1, task_mix=[("report", 1.5), ("vqa_short", -0.5)])
    with pytest.raises(ConfigError):
        StageConfig(stage=1, task_mix=[("no_such_task", 1.0)])


def test_stage_config_lr_override_scope():
    StageConfig(stage=2, lr_overrides={"lora": 1e-5, "vision_encoder": 2e-4})
    with pytest.raises(ConfigError):
        StageConfig(stage=1, lr_overrides={"lora": 1e-5})
    with pytest.raises(ConfigError):
        StageConfig(stage=3, lr_overrides={"lm_base": 1e-5})


# --- loss weights ----------------------------------------------------------


def test_loss_weights_validation():
    LossWeights(lambda_text=0.0)  # zero is allowed
    with pytest.raises(ConfigError):
        LossWeights(lambda_text=-0.1)
    with pytest.raises(ConfigError):
        LossWeights(lambda_mask=-1.0)
    with pytest.raises(ConfigError):
        LossWeights(dice_eps=0.0)


# --- whole-tree validation -------------------------------------------------


def test_config_defaults_are_consistent():
    cfg = Config()
    assert cfg.encoder.input_shape == cfg.data.shape
    stages = sorted(s.stage for s in cfg.stages)
    assert stages == [1, 2, 3]


def test_config_rejects_duplicate_stages():
    with pytest.raises(ConfigError):
        Config(stages=[StageConfig(stage=1), StageConfig(stage=1)])


def test_config_rejects_shape_mismatch_with_data():
    with pytest.raises(ConfigError):
        Config(data=DataConfig(shape=(8, 32, 32)))


def test_config_stage_lookup():
    cfg = Config()
    assert cfg.stage(2).stage == 2
    with pytest.raises(ConfigError):
        Config(stages=[StageConfig(stage=1)]).stage(3)


def test_data_config_rejects_unknown_difficulty():
    with pytest.raises(ConfigError):
        DataConfig(difficulty="impossible")


# --- serialization ---------------------------------------------------------


def test_config_json_round_trip_preserves_everything():
    cfg = Config()
    cfg.stages[2].lr_overrides = {"seg_decoder": 2e-3}
    restored = Config.from_json(cfg.to_json())
    assert restored.to_dict() == cfg.to_dict()
    assert restored.stage(3).lr_overrides == {"seg_decoder": 2e-3}
    assert isinstance(restored.encoder.input_shape, tuple)
    assert isinstance(restored.window, tuple)
    assert all(isinstance(t, tuple) for t in restored.stage(2).task_mix)


def test_config_round_trip_through_file(tmp_path):
    cfg = Config(seed=5)
    path = tmp_path / "cfg.json"
    cfg.to_json(path)
    restored = Config.from_json(path.read_text())
    assert restored.seed == 5
    assert restored.to_dict() == cfg.to_dict()


def test_config_from_dict_accepts_plain_nested_dicts():
    raw = json.loads(Config().to_json())
    raw["seed"] = 9
    raw["stages"][0]["lr"] = 5e-4
    cfg = Config.from_dict(raw)
    assert cfg.seed == 9
    assert cfg.stage(1).lr == pytest.approx(5e-4)


# --- fingerprint -----------------------------------------------------------


def test_fingerprint_is_stable_across_processes_inputs():
    assert Config().fingerprint() == Config().fingerprint()


def test_fingerprint_tracks_architecture_fields():
    base = Config().fingerprint()
    changed = Config()
    changed.segdec = dataclasses.replace(changed.segdec, d_model=changed.segdec.d_model * 2)
    assert changed.fingerprint() != base
    changed2 = Config(window=(-500.0, 500.0))
    assert changed2.fingerprint() != base
    changed3 = Config()
    changed3.lm = dataclasses.replace(changed3.lm, n_layers=changed3.lm.n_layers + 1)
    assert changed3.fingerprint() != base


def test_fingerprint_ignores_training_and_serving_settings():
    base = Config().fingerprint()
    assert Config(seed=123).fingerprint() == base
    assert Config(checkpoint_dir="elsewhere").fingerprint() == base
    trained = Config(stages=[StageConfig(stage=1, steps=999, lr=1.0)])
    assert trained.fingerprint() == base


def test_fingerprint_ignores_vocab_size():
    a = Config()
    a.lm = dataclasses.replace(a.lm, vocab_size=100)
    b = Config()
    b.lm = dataclasses.replace(b.lm, vocab_size=5000)
    assert a.fingerprint() == b.fingerprint()


# --- loading ---------------------------------------------------------------


def test_load_config_defaults_when_unset(monkeypatch):
    monkeypatch.delenv(ENV_VAR, raising=False)
    cfg = load_config()
    assert cfg.to_dict() == Config().to_dict()


def test_load_config_explicit_path_wins(tmp_path, monkeypatch):
    a = tmp_path / "a.json"
    b = tmp_path / "b.json"
    Config(seed=1).to_json(a)
    Config(seed=2).to_json(b)
    monkeypatch.setenv(ENV_VAR, str(b))
    assert load_config(a).seed == 1
    assert load_config().seed == 2


def test_load_config_missing_file_raises(monkeypatch):
    monkeypatch.setenv(ENV_VAR, "/nonexistent/config.json")
    with pytest.raises(FileNotFoundError):
        load_config()


def test_stage_warmup_and_clip_validation():
    StageConfig(stage=1, steps=100, warmup_steps=99, grad_clip=1.0)
    with pytest.raises(ConfigError):
        StageConfig(stage=1, steps=100, warmup_steps=-1)
    with pytest.raises(ConfigError):
        StageConfig(stage=1, steps=100, warmup_steps=100)
    with pytest.raises(ConfigError):
        StageConfig(stage=1, grad_clip=-0.5)


def test_stage_schedule_extras_survive_json_round_trip():
    cfg = Config(
        stages=[
            StageConfig(stage=1, steps=10),
            StageConfig(stage=2, steps=10),
            StageConfig(
                stage=3,
                steps=10,
                warmup_steps=4,
                grad_clip=1.5,
                lr_overrides={"seg_decoder": 2e-3},
            ),
        ]
    )
    back = Config.from_json(cfg.to_json())
    stage3 = back.stage(3)
    assert stage3.warmup_steps == 4
    assert stage3.grad_clip == 1.5
    assert stage3.lr_overrides == {"seg_decoder": 2e-3}
