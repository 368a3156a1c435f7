"""
時系列データセットのテスト
"""

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.config import DataSection, Layout
from src.dataset import (
    IngestionError,
    SplitSpec,
    denormalize,
    ingest,
    load_frames,
    normalize,
    save_frames,
    split,
)


def _write_wide(path, rows, households=("H001", "H002"), start="2020-01-01", freq="15min"):
    timestamps = pd.date_range(start, periods=rows, freq=freq)
    table = pd.DataFrame({"timestamp": timestamps.strftime("%Y-%m-%d %H:%M:%S")})
    for i, household in enumerate(households):
        table[household] = np.linspace(0.0, 1.0 + i, rows)
    table.to_csv(path, index=False)
    return path


def test_ingest_wide(tmp_path):
    """2世帯・96行のワイド形式 → K=96 の時系列が2つ"""
    path = _write_wide(tmp_path / "wide.csv", 96)
    frames = ingest(str(path), DataSection(path=str(path)))
    assert list(frames) == ["H001", "H002"]
    assert all(frame.K == 96 for frame in frames.values())
    assert frames["H001"].start == pd.Timestamp("2020-01-01")
    assert frames["H001"].steps_per_day == 96


def test_ingest_three_days(tmp_path):
    """3日分の15分値 → K=288"""
    path = _write_wide(tmp_path / "wide.csv", 288, households=("H001",))
    frames = ingest(str(path), DataSection(path=str(path)))
    assert frames["H001"].K == 288


def test_ingest_long(tmp_path):
    """ロング形式"""
    timestamps = pd.date_range("2020-01-01", periods=4, freq="15min").strftime("%Y-%m-%d %H:%M:%S")
    table = pd.DataFrame({
        "timestamp": list(timestamps) * 2,
        "household": ["A"] * 4 + ["B"] * 4,
        "value": [0, 1, 2, 3, 4, 5, 6, 7],
    })
    path = tmp_path / "long.csv"
    table.to_csv(path, index=False)
    frames = ingest(str(path), DataSection(path=str(path), layout=Layout.LONG))
    assert_array_equal(frames["A"].values, [0, 1, 2, 3])
    assert_array_equal(frames["B"].values, [4, 5, 6, 7])


def test_ingest_duplicate_timestamp(tmp_path):
    """重複したタイムスタンプはそのタイムスタンプを示すエラー"""
    path = tmp_path / "dup.csv"
    path.write_text(
        "timestamp,H001\n"
        "2020-01-01 00:00:00,0\n"
        "2020-01-01 00:15:00,1\n"
        "2020-01-01 00:15:00,2\n",
        encoding="utf-8"
    )
    with pytest.raises(IngestionError) as excinfo:
        ingest(str(path), DataSection(path=str(path)))
    assert excinfo.value.timestamp == "2020-01-01 00:15:00"
    assert excinfo.value.row == 4


def test_ingest_gap_interpolation(tmp_path):
    """許容長以下の欠損は線形補間、超えるとエラー"""
    path = tmp_path / "gap.csv"
    path.write_text(
        "timestamp,H001\n"
        "2020-01-01 00:00:00,0\n"
        "2020-01-01 00:15:00,\n"
        "2020-01-01 00:30:00,2\n"
        "2020-01-01 01:15:00,5\n",
        encoding="utf-8"
    )
    frames = ingest(str(path), DataSection(path=str(path), max_gap_steps=2))
    assert_allclose(frames["H001"].values, [0, 1, 2, 3, 4, 5])

    with pytest.raises(IngestionError):
        ingest(str(path), DataSection(path=str(path), max_gap_steps=1))


def test_ingest_bad_value(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("timestamp,H001\n2020-01-01 00:00:00,abc\n", encoding="utf-8")
    with pytest.raises(IngestionError) as excinfo:
        ingest(str(path), DataSection(path=str(path)))
    assert excinfo.value.household == "H001"
    assert excinfo.value.row == 2


def test_ingest_household_subset(tmp_path):
    path = _write_wide(tmp_path / "wide.csv", 8)
    frames = ingest(str(path), DataSection(path=str(path), households=["H002"]))
    assert list(frames) == ["H002"]
    with pytest.raises(IngestionError):
        ingest(str(path), DataSection(path=str(path), households=["H999"]))


def test_normalize_examples(make_frame):
    """正規化の例"""
    assert_allclose(normalize(make_frame([0, 2, 4])).values, [0, 0.5, 1])

    zeros = normalize(make_frame([0, 0, 0]))
    assert_array_equal(zeros.values, [0, 0, 0])
    assert zeros.scale == 1.0

    assert_array_equal(normalize(make_frame([1, 1])).values, [1, 1])


def test_normalize_idempotent(make_frame):
    once = normalize(make_frame([0.5, 3.0, 1.5]))
    twice = normalize(once)
    assert_array_equal(once.values, twice.values)
    assert once.scale == twice.scale == 3.0
    assert_allclose(denormalize(once).values, [0.5, 3.0, 1.5])


def test_normalize_rejects_negative(make_frame):
    with pytest.raises(IngestionError):
        normalize(make_frame([0.1, -0.2]))


def test_split_halves(make_frame):
    """K=100, 0.5 → 50/50（分割位置は後半の offset に残る）"""
    frame = make_frame(np.arange(100))
    train, test = split(frame, SplitSpec(0.5), horizon=10, max_lag=10)
    assert train.K == 50 and test.K == 50
    assert test.offset == 50
    assert test.values[0] == 50
    assert test.start == frame.start + pd.Timedelta(minutes=15 * 50)


def test_split_reference_size():
    assert SplitSpec(0.5).boundary_index(52608) == 26304


def test_split_too_short(make_frame):
    """K=10, H=H1=96 → エラー"""
    with pytest.raises(IngestionError):
        split(make_frame(np.zeros(10)), SplitSpec(0.5), horizon=96, max_lag=96)


def test_frames_round_trip(tmp_path, make_frame):
    """キャッシュ用CSVの保存と読み込み（値はビット単位で一致）"""
    frame = normalize(make_frame(np.random.default_rng(0).uniform(size=50) * 3.7))
    _, test = split(frame, SplitSpec(0.5), horizon=5, max_lag=5)
    save_frames({"H001": test}, tmp_path / "frames.csv")
    loaded = load_frames(tmp_path / "frames.csv")["H001"]
    assert_array_equal(loaded.values, test.values)
    assert loaded.scale == test.scale
    assert loaded.offset == 25
    assert loaded.start == test.start
