"""
設定のテスト
"""

from pathlib import Path

import pytest
import yaml

from src.config import Config, ConfigError, NeighborBackend, RunConfig, load_run_config, parse_run_config


def test_defaults():
    """デフォルト設定"""
    config = parse_run_config(None)
    assert config.features.horizon == 96
    assert config.features.max_lag == 96
    assert config.features.period == 96
    assert config.features.window_days == 7
    assert config.features.night_threshold == 1e-4
    assert config.features.n_features == 4
    assert config.knn.neighbors == [50, 70, 100, 120]
    assert config.knn.backend == NeighborBackend.AUTO
    assert config.regression.degrees == [1, 2, 3]
    assert config.run.train_fraction == 0.5


def test_quantile_grid():
    """分位点グリッドは 0.01..0.99 の99個"""
    grid = parse_run_config({}).quantile_grid()
    assert len(grid) == 99
    assert grid[0] == 0.01
    assert grid[49] == 0.5
    assert grid[-1] == 0.99


@pytest.mark.parametrize("raw", [
    {"regression": {"degrees": [4]}},
    {"knn": {"neighbors": [0]}},
    {"knn": {"neighbors": []}},
    {"run": {"train_fraction": 1.0}},
    {"features": {"horizon": 0}},
    {"evaluation": {"quantile_step": 0.03}},
    {"report": {"fan_knn": 33}},
    {"regression": {"degrees": [1]}, "report": {"fan_technique": "Poly3"}},
])
def test_invalid_config(raw):
    """不正な設定は ConfigError"""
    with pytest.raises(ConfigError):
        parse_run_config(raw)


def test_neighbors_sorted_and_deduplicated():
    config = parse_run_config({"knn": {"neighbors": [100, 50, 100]}})
    assert config.knn.neighbors == [50, 100]


def test_overrides():
    """CLIフラグでの上書き"""
    config = parse_run_config({}).with_overrides(
        households=["H002"], knn=[20], degrees=[2], out="/tmp/out", workers=3, seed=7
    )
    assert config.data.households == ["H002"]
    assert config.knn.neighbors == [20]
    assert config.regression.degrees == [2]
    assert config.run.output_dir == "/tmp/out"
    assert config.run.workers == 3
    assert config.run.seed == 7


def test_overrides_are_validated():
    with pytest.raises(ConfigError):
        parse_run_config({}).with_overrides(degrees=[5])


DEFAULT_YAML = Path(__file__).resolve().parent.parent / "configs" / "default.yaml"


@pytest.mark.parametrize("overrides, expected", [
    ({"knn": [50]}, {"fan_knn": None, "fan_technique": "Poly1", "fan_household": "H001"}),
    ({"knn": [70, 100]}, {"fan_knn": 100, "fan_technique": "Poly1", "fan_household": "H001"}),
    ({"degrees": [2]}, {"fan_knn": 100, "fan_technique": None, "fan_household": "H001"}),
    ({"households": ["H002"]}, {"fan_knn": 100, "fan_technique": "Poly1", "fan_household": None}),
])
def test_overrides_reset_fan_settings(overrides, expected):
    """デフォルトの設定ファイルに対する上書きで扇形図の指定が対象外になればデフォルトに戻る"""
    config = load_run_config(str(DEFAULT_YAML)).with_overrides(**overrides)
    assert config.report.model_dump(include=set(expected)) == expected
    assert config.report.fan_day == 3


def test_yaml_round_trip(tmp_path):
    """to_yaml で書き出した設定を読み戻すと同じ設定になる"""
    config = parse_run_config({"knn": {"neighbors": [10]}, "report": {"fan_knn": 10}})
    path = tmp_path / "config.yaml"
    path.write_text(config.to_yaml(), encoding="utf-8")
    assert load_run_config(str(path)) == config


def test_load_errors(tmp_path):
    """ファイルがない・マッピングでない場合"""
    with pytest.raises(ConfigError):
        load_run_config(str(tmp_path / "missing.yaml"))
    path = tmp_path / "list.yaml"
    path.write_text(yaml.safe_dump([1, 2]), encoding="utf-8")
    with pytest.raises(ConfigError):
        load_run_config(str(path))


def test_cache_dir_resolution(monkeypatch, tmp_path):
    monkeypatch.setattr(Config, "CACHE_DIR", "")
    assert Config.resolve_cache_dir(str(tmp_path)) == tmp_path / "cache"
    monkeypatch.setattr(Config, "CACHE_DIR", str(tmp_path / "elsewhere"))
    assert Config.resolve_cache_dir(str(tmp_path)) == tmp_path / "elsewhere"


def test_section_digest():
    digest = RunConfig().section_digest("knn", "features")
    assert set(digest) == {"knn", "features"}
    assert digest["knn"]["neighbors"] == [50, 70, 100, 120]
