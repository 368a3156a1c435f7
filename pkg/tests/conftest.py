"""
テスト共通のフィクスチャ
"""

import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.config import Config, parse_run_config
from src.dataset import TimeSeriesFrame
from src.synthetic import default_sites, generate_frames, write_wide_csv


@pytest.fixture(autouse=True)
def _isolate_process_config(tmp_path, monkeypatch):
    """ログファイルとキャッシュをテストごとの一時ディレクトリに向ける"""
    monkeypatch.setattr(Config, "LOG_FILE", str(tmp_path / "test.log"))
    monkeypatch.setattr(Config, "CACHE_DIR", "")
    monkeypatch.setattr(Config, "ENABLE_CACHE", True)


@pytest.fixture
def make_frame():
    """値の配列から TimeSeriesFrame を作る"""
    def _make(values, household="H001", start="2020-01-01", resolution_minutes=15, offset=0):
        return TimeSeriesFrame(
            household_id=household,
            values=np.asarray(values, dtype=float),
            start=pd.Timestamp(start),
            resolution_minutes=resolution_minutes,
            offset=offset,
        )
    return _make


@pytest.fixture
def sample_csv(tmp_path) -> Path:
    """1時間刻み・24日分の2世帯のワイド形式CSV"""
    frames = generate_frames(default_sites(2), days=24, resolution_minutes=60, start="2011-06-01", seed=3)
    return write_wide_csv(frames, tmp_path / "data" / "pv.csv")


@pytest.fixture
def small_config(tmp_path, sample_csv):
    """sample_csv 用の小さな実験設定（H = H_p = 24, H1 = 4, m = 2）"""
    def _config(**overrides):
        raw = {
            "data": {"path": str(sample_csv), "resolution_minutes": 60},
            "features": {"horizon": 24, "max_lag": 4, "period": 24, "window_days": 2, "n_features": 2},
            "knn": {"neighbors": [10, 20]},
            "regression": {"degrees": [1, 2]},
            "run": {"output_dir": str(tmp_path / "runs"), "workers": 1},
            "report": {"fan_household": "H001", "fan_day": 2, "fan_technique": "Poly1", "fan_knn": 10},
        }
        for section, values in overrides.items():
            raw.setdefault(section, {}).update(values)
        return parse_run_config(raw)
    return _config


@pytest.fixture(autouse=True)
def _quiet_logging():
    logging.getLogger("src").setLevel(logging.WARNING)
    yield
    logging.getLogger("src").setLevel(logging.NOTSET)
