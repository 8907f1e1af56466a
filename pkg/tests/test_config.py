import pytest
from hypothesis import given, settings, strategies as st

from ssmnormals.config import TrainConfig, list_presets, preset_path
from ssmnormals.errors import ConfigError


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.patch_size, cfg.epochs, cfg.batch_size, cfg.lr) == (700, 900, 100, 5e-4)
    assert cfg.lr_milestones == [200, 400, 600, 800] and cfg.lr_factor == 0.2
    assert cfg.token_count == 175


@pytest.mark.parametrize("bad", [dict(patch_size=702), dict(depth=9), dict(lr=0.0), dict(lr_factor=1.0),
                                 dict(lr_milestones=[400, 200]), dict(fusion_mode="mean"),
                                 dict(knn_k=175), dict(epochs=0)])
def test_invalid_values(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_overrides_and_coercion():
    cfg = TrainConfig().with_overrides(["depth=8", "use_wt_loss=false", "lr=1e-3", "lr_milestones=[10,20]"])
    assert cfg.depth == 8 and cfg.use_wt_loss is False and cfg.lr == 1e-3 and cfg.lr_milestones == [10, 20]
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig().with_overrides(["nope=1"])
    with pytest.raises(ConfigError):
        TrainConfig().with_overrides(["depth=seven"])
    with pytest.raises(ConfigError):
        TrainConfig().with_overrides(["depth"])


def test_file_roundtrip(tmp_path):
    cfg = TrainConfig(depth=6, fusion_mode="max", lr_milestones=[5])
    path = tmp_path / "x.cfg"
    path.write_text(cfg.dumps())
    assert TrainConfig.from_file(path) == cfg
    path.write_text("[section]\na = 1\n")
    with pytest.raises(ConfigError, match="flat"):
        TrainConfig.from_file(path)
    with pytest.raises(ConfigError):
        TrainConfig.from_file(tmp_path / "missing.cfg")


def test_presets_load():
    names = list_presets()
    for required in ("paper", "ablation-no-attention", "ablation-no-mamba", "ablation-depth6", "ablation-depth8",
                     "ablation-no-wt-loss", "ablation-n600", "ablation-n800", "ablation-max-fusion"):
        assert required in names
    for name in names:
        TrainConfig.from_file(preset_path(name))
    assert TrainConfig.from_file(preset_path("paper")) == TrainConfig()
    assert TrainConfig.from_file(preset_path("ablation-no-attention")).effective_fusion == "max"
    with pytest.raises(ConfigError):
        preset_path("nonexistent")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2000))
def test_lr_is_monotone_nonincreasing(epoch):
    cfg = TrainConfig()
    assert cfg.lr_at_epoch(epoch + 1) <= cfg.lr_at_epoch(epoch)


def test_hash_tracks_content():
    assert TrainConfig().config_hash() == TrainConfig().config_hash()
    assert TrainConfig(seed=1).config_hash() != TrainConfig().config_hash()
