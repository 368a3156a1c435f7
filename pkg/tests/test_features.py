"""
特徴量のテスト
"""

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.dataset import TimeSeriesFrame
from src.features import (
    CandidatePool,
    FeatureDescriptor,
    FeatureError,
    FeatureSpec,
    LearningSet,
    NightMask,
    assemble,
    candidate_pool,
    derive,
    export_learning_set,
    load_learning_set,
    night_accuracy,
    night_mask,
    night_min_origin,
    rolling_max,
    rolling_mean,
)


def _daily(samples, period=4, fill=0.0):
    """8日分の同時刻に samples を置き、それ以外は fill の系列（最後のサンプルが k）"""
    values = np.full(period * len(samples), fill)
    values[period - 1::period] = samples
    return values


def test_rolling_max_examples(make_frame):
    """8日分の同時刻の最大値"""
    samples = [0.5] * 8
    samples[3] = 0.7
    frame = make_frame(_daily(samples))
    assert rolling_max(frame, period=4, window_days=7)[-1] == pytest.approx(0.7)

    frame = make_frame(_daily([0.3] * 8))
    assert rolling_max(frame, period=4, window_days=7)[-1] == pytest.approx(0.3)

    frame = make_frame(_daily([0.1 * j for j in range(8)]))
    assert rolling_max(frame, period=4, window_days=7)[-1] == pytest.approx(0.7)


def test_rolling_mean_examples(make_frame):
    """8日分の同時刻の平均値"""
    frame = make_frame(_daily([0.3] * 8))
    assert rolling_mean(frame, period=4, window_days=7)[-1] == pytest.approx(0.3)

    frame = make_frame(_daily([0.0, 0.8] * 4))
    assert rolling_mean(frame, period=4, window_days=7)[-1] == pytest.approx(0.4)

    frame = make_frame(_daily([0.1 * j for j in range(8)]))
    assert rolling_mean(frame, period=4, window_days=7)[-1] == pytest.approx(0.35)


def test_rolling_unavailable_prefix(make_frame):
    """k < m·H_p は利用不可 (NaN)"""
    frame = make_frame(np.ones(40))
    values = rolling_max(frame, period=4, window_days=7)
    assert np.isnan(values[:28]).all()
    assert (values[28:] == 1.0).all()


def test_candidate_pool_order():
    """元系列ごとに遅れ 0..H1 の順"""
    pool = candidate_pool(FeatureSpec(max_lag=2))
    assert [d.name for d in pool] == [
        "P[k]", "P[k-1]", "P[k-2]",
        "P_max[k]", "P_max[k-1]", "P_max[k-2]",
        "P_mean[k]", "P_mean[k-1]", "P_mean[k-2]",
    ]
    assert FeatureSpec(max_lag=96).pool_size == 291


def test_invalid_selection():
    with pytest.raises(FeatureError):
        FeatureSpec(max_lag=2, selected=(9,))
    with pytest.raises(FeatureError):
        FeatureSpec(max_lag=2, selected=(1, 1))


def test_assemble_row_count(make_frame):
    """K=300, H=H1=96 → N=108（利用可否で除外する前）"""
    frame = make_frame(np.linspace(0, 1, 300))
    spec = FeatureSpec(horizon=96, max_lag=96, selected=(0,))
    derived = derive(frame, spec)
    learning_set = assemble(frame, derived.P_max, derived.P_mean, spec)
    assert learning_set.N == 108
    assert learning_set.dropped == 0
    assert_array_equal(learning_set.origins, np.arange(96, 204))


def test_assemble_lag0(make_frame):
    """P の遅れ0だけを選ぶと X は揃えた P の列"""
    values = np.random.default_rng(1).uniform(size=300)
    frame = make_frame(values)
    spec = FeatureSpec(horizon=96, max_lag=96, selected=(0,))
    derived = derive(frame, spec)
    learning_set = assemble(frame, derived.P_max, derived.P_mean, spec)
    assert_array_equal(learning_set.X[:, 0], values[96:204])
    assert_array_equal(learning_set.y, values[192:300])
    assert_array_equal(learning_set.targets, np.arange(192, 300))


def test_assemble_constant_series(make_frame):
    """P ≡ 0.5 → X も y も全て 0.5"""
    frame = make_frame(np.full(400, 0.5))
    spec = FeatureSpec(horizon=24, max_lag=4, period=24, window_days=2, selected=(1, 5, 14))
    derived = derive(frame, spec)
    learning_set = assemble(frame, derived.P_max, derived.P_mean, spec)
    assert learning_set.S == 3
    assert (learning_set.X == 0.5).all()
    assert (learning_set.y == 0.5).all()


def test_assemble_drops_unavailable(make_frame):
    """派生系列が利用不可の行は除外して数える"""
    frame = make_frame(np.full(200, 0.5))
    spec = FeatureSpec(horizon=24, max_lag=4, period=24, window_days=2, selected=(5,))
    derived = derive(frame, spec)
    learning_set = assemble(frame, derived.P_max, derived.P_mean, spec)
    # P_max[k] は k >= 48 で利用可能
    assert learning_set.origins[0] == 48
    assert learning_set.dropped == 48 - 4


def test_origins_are_global(make_frame):
    """分割後の時系列では origins は元系列のインデックス"""
    frame = make_frame(np.linspace(0, 1, 100), offset=1000)
    spec = FeatureSpec(horizon=10, max_lag=2, period=10, window_days=1, selected=(0,))
    derived = derive(frame, spec)
    learning_set = assemble(frame, derived.P_max, derived.P_mean, spec)
    assert learning_set.origins[0] == 1002
    pool = CandidatePool(frame, derived, spec)
    assert_array_equal(pool.columns([0], learning_set.origins)[:, 0], learning_set.X[:, 0])


def _night_case(p_now, p_before, tau=1e-4):
    values = np.full(300, 0.5)
    values[100] = p_before
    values[196] = p_now
    frame = TimeSeriesFrame("H", values, pd.Timestamp("2020-01-01"), 15)
    spec = FeatureSpec(horizon=96, max_lag=96, selected=(0,))
    derived = derive(frame, spec)
    learning_set = assemble(frame, derived.P_max, derived.P_mean, spec)
    mask = night_mask(frame, learning_set, spec, tau)
    return mask.flags[learning_set.origins == 196][0]


def test_night_examples():
    """夜間判定の例（τ を含む）"""
    assert _night_case(0.0, 0.0)
    assert _night_case(0.00005, 0.0001)
    assert not _night_case(0.2, 0.0)


def test_night_without_previous_day(make_frame):
    """k-H_p が系列の前にある行は昼間扱い"""
    frame = make_frame(np.zeros(300))
    spec = FeatureSpec(horizon=96, max_lag=10, selected=(0,))
    derived = derive(frame, spec)
    learning_set = assemble(frame, derived.P_max, derived.P_mean, spec)
    mask = night_mask(frame, learning_set, spec)
    assert not mask.flags[learning_set.origins < 96].any()
    assert mask.flags[learning_set.origins >= 96].all()


def test_night_min_origin_on_test_half(make_frame):
    """後半の系列でも night_min_origin 以降の行は全て判定できる"""
    frame = make_frame(np.zeros(300), offset=300)
    spec = FeatureSpec(horizon=96, max_lag=10, selected=(0,))
    derived = derive(frame, spec)
    learning_set = assemble(frame, derived.P_max, derived.P_mean, spec, min_origin=night_min_origin(spec))
    assert learning_set.origins[0] == 300 + 96
    assert night_mask(frame, learning_set, spec).flags.all()


def test_night_accuracy():
    learning_set = LearningSet(
        X=np.zeros((4, 1)), y=np.array([0.0, 0.0, 0.3, 0.0]),
        descriptors=[FeatureDescriptor("P", 0)], household_id="H", origins=np.arange(4)
    )
    mask = NightMask(flags=np.array([True, False, True, False]))
    accuracy = night_accuracy(learning_set, mask)
    assert accuracy["precision"] == 0.5
    assert accuracy["agreement"] == 0.25
    assert accuracy["night_count"] == 2


def test_learning_set_csv_round_trip(tmp_path, make_frame):
    """書き出した学習ペアを読み戻すと同じ値"""
    frame = make_frame(np.random.default_rng(2).uniform(size=200))
    spec = FeatureSpec(horizon=24, max_lag=4, period=24, window_days=2, selected=(0, 9))
    derived = derive(frame, spec)
    learning_set = assemble(frame, derived.P_max, derived.P_mean, spec)
    mask = night_mask(frame, learning_set, spec)
    path = export_learning_set(learning_set, mask, tmp_path / "train.csv")

    loaded, loaded_mask = load_learning_set(path, spec.descriptors(), "H001", horizon=24)
    assert_array_equal(loaded.X, learning_set.X)
    assert_array_equal(loaded.y, learning_set.y)
    assert_array_equal(loaded.origins, learning_set.origins)
    assert_array_equal(loaded_mask.flags, mask.flags)
    assert_allclose(loaded.targets, learning_set.targets)
