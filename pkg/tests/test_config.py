import pytest

from nsggan.config import (RunPaths, TrainConfig, apply_overrides, dumps_config, load_config, parse_override,
                           save_config)
from nsggan.generator import ConfigError


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.learning_rate, cfg.batch_size, cfg.beta1, cfg.beta2) == (40, 1e-4, 4, 0.5, 0.999)
    w = cfg.loss_weights()
    assert (w.id, w.pix, w.cyc, w.self, w.age_reg, w.age_est, w.constraint, w.delta) == (10, 1, 1, 10, 800, 10, 1, 0.5)


@pytest.mark.parametrize("text,key,value", [("epochs=3", "epochs", 3), ("strategy=joint", "strategy", "joint"),
                                           ("strategy='self_only'", "strategy", "self_only"),
                                           ("drop_classes=[3, 7]", "drop_classes", [3, 7]),
                                           ("frm_enabled=false", "frm_enabled", False), ("delta = 0.25", "delta", 0.25)])
def test_parse_override(text, key, value):
    assert parse_override(text) == (key, value)


def test_override_errors():
    with pytest.raises(ConfigError):
        parse_override("epochs")
    with pytest.raises(ConfigError, match="unknown"):
        apply_overrides(TrainConfig(), ["wavelet_weight=1"])
    with pytest.raises(ConfigError):
        apply_overrides(TrainConfig(), ["epochs=ten"])
    with pytest.raises(ConfigError):
        apply_overrides(TrainConfig(), ["frm_enabled=1"])


@pytest.mark.parametrize("bad", [dict(learning_rate=0.0), dict(strategy="both"), dict(batch_size=0),
                                 dict(image_size=48), dict(delta=2.0), dict(lambda_pix=-1.0),
                                 dict(constraint_mode="x"), dict(projection_enabled=False),
                                 dict(critic_lr_ratio=0.0)])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_int_promoted_to_float():
    assert apply_overrides(TrainConfig(), ["learning_rate=1"]).learning_rate == 1.0


def test_file_round_trip(tmp_path):
    cfg = apply_overrides(TrainConfig(), ["epochs=2", "strategy=self_only", "drop_classes=[]"])
    path = save_config(cfg, tmp_path / "c.toml")
    again = load_config(path)
    assert again == cfg and again.digest() == cfg.digest()
    assert dumps_config(again) == path.read_text()


def test_file_errors(tmp_path):
    (tmp_path / "bad.toml").write_text("epochs = \n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.toml")
    (tmp_path / "nested.toml").write_text("[train]\nepochs = 2\n")
    with pytest.raises(ConfigError, match="flat"):
        load_config(tmp_path / "nested.toml")
    (tmp_path / "unknown.toml").write_text("epoch = 2\n")
    with pytest.raises(ConfigError, match="unknown"):
        load_config(tmp_path / "unknown.toml")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")


def test_file_then_overrides(tmp_path):
    (tmp_path / "c.toml").write_text("epochs = 5\nseed = 1\n")
    cfg = load_config(tmp_path / "c.toml", ["seed=9"])
    assert (cfg.epochs, cfg.seed) == (5, 9)


def test_every_field_addressable():
    cfg = TrainConfig()
    for key, value in cfg.to_dict().items():
        assert apply_overrides(cfg, {key: value}) == cfg


def test_digest_changes_with_config():
    assert TrainConfig().digest() != TrainConfig(seed=1).digest()


def test_run_paths(tmp_path):
    p = RunPaths(tmp_path)
    assert p.log.name == "log.jsonl" and p.resolved_config.name == "resolved_config.toml"
    assert p.checkpoint().name == "last.safetensors" and p.checkpoint(12).name == "ckpt_000012.safetensors"
