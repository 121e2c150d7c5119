import itertools

import pytest

from mmpoint.config import (
    PointAugmentConfig,
    ProjectionConfig,
    RunConfig,
    Toggles,
    default_cross_dims,
    validate_config,
)
from mmpoint.errors import ConfigError

from .fake_source import data_dir


def test_default_projection():
    cfg = RunConfig()
    assert cfg.projection.d_intra == 256
    assert cfg.projection.d_cross == [384, 448, 512, 576]
    validate_config(cfg.projection)


@pytest.mark.parametrize(
    "d_intra,d_cross,match",
    [
        (256, [128, 448, 512, 576], "cross <= intra"),
        (256, [512, 384, 448, 576], "non-monotone"),
        (256, [], "empty"),
    ],
)
def test_validate_config_rejects(d_intra, d_cross, match):
    with pytest.raises(ConfigError, match=match):
        validate_config(ProjectionConfig(d_intra=d_intra, d_cross=d_cross))


def test_validate_config_lists_every_violation():
    with pytest.raises(ConfigError) as exc:
        validate_config(ProjectionConfig(d_intra=256, d_cross=[512, 128]))
    assert len(exc.value.violations) == 2


def test_validate_config_exhaustive_grid():
    for d_intra in range(1, 5):
        for m in (1, 2, 3):
            for d_cross in itertools.product(range(1, 6), repeat=m):
                ok = all(d > d_intra for d in d_cross) and all(
                    a <= b for a, b in zip(d_cross, d_cross[1:])
                )
                cfg = ProjectionConfig(d_intra=d_intra, d_cross=list(d_cross))
                if ok:
                    validate_config(cfg)
                else:
                    with pytest.raises(ConfigError):
                        validate_config(cfg)


def test_load_sample_config(test_config):
    assert test_config.m == 2
    assert test_config.projection.d_cross == [24, 32]
    assert test_config.encoder.point_dim == 64
    assert test_config.encoder.image_dim == 32


def test_dump_load_roundtrip(tmp_path, test_config):
    test_config.dump(tmp_path / "run-config.json")
    assert RunConfig.load(tmp_path / "run-config.json") == test_config


def test_load_unreadable(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        RunConfig.load(tmp_path / "missing.json")
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(ConfigError, match="cannot read"):
        RunConfig.load(tmp_path / "broken.json")


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="learning_rate"):
        RunConfig.parse({"m": 2, "learning_rate": 0.1})


@pytest.mark.parametrize(
    "data,match",
    [
        ({"m": 25}, "m"),
        ({"m": 2, "proj": {"d_intra": 16, "d_cross": [24, 32, 40]}}, "2 entries|3 entries"),
        ({"m": 7}, "catalog"),
        ({"point_aug": {"scale_low": 1.5, "scale_high": 1.2}}, "scale_low"),
        ({"loss": {"tau": 0}}, "tau"),
    ],
)
def test_invalid_run_configs(data, match):
    with pytest.raises(ConfigError, match=match):
        RunConfig.parse(data)


def test_unified_augmentation_allows_large_m():
    cfg = RunConfig.parse({"m": 24, "toggles": {"multi_level_aug": False}})
    assert cfg.projection.m == 24


def test_with_overrides(test_config):
    cfg = test_config.with_overrides(loss__tau=0.5, toggles__multi_mlp=False)
    assert cfg.loss.tau == 0.5
    assert not cfg.toggles.multi_mlp
    assert test_config.loss.tau == 0.1


def test_with_overrides_m_resets_cross_dims(test_config):
    cfg = test_config.with_overrides(m=3, proj__d_intra=256)
    assert cfg.projection.d_cross == default_cross_dims(3) == [384, 448, 512]


@pytest.mark.parametrize(
    "toggles,strategy",
    [
        (Toggles(), "multi-level"),
        (Toggles(multi_level_aug=False), "unified"),
        (Toggles(multi_level_aug=False, per_view_aug=True), "multi"),
        (Toggles(per_view_aug=True), "multi-level"),
    ],
)
def test_aug_strategy(toggles, strategy):
    assert toggles.aug_strategy == strategy


def test_point_augment_presets():
    assert PointAugmentConfig.identity().rotation_deg == 0
    rot = PointAugmentConfig.rotation_only()
    assert (rot.rotation_deg, rot.scale_low, rot.jitter_sigma, rot.dropout_max) == (180, 1, 0, 0)


def test_sample_data_is_present():
    assert (data_dir / "run-config.json").exists()
