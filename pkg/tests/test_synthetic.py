"""
合成データと、既知の分位点の復元テスト
"""

import numpy as np
import pytest

from src.evaluation import reliability_deviation_quantile
from src.features import FeatureDescriptor, FeatureSpec, LearningSet
from src.knn_quantile import compute_weights, pairwise_neighbors, transform_targets
from src.regression import get_technique
from src.synthetic import (
    clear_sky_profile,
    default_sites,
    generate_frames,
    heteroscedastic_pairs,
    heteroscedastic_quantile,
)

GRID = np.round(np.arange(1, 100) * 0.01, 10)


def test_generated_series_shape_and_night():
    """非負で、夜間は厳密に 0"""
    frames = generate_frames(default_sites(3), days=5, resolution_minutes=60, seed=1)
    assert list(frames) == ["H001", "H002", "H003"]
    for frame in frames.values():
        assert frame.K == 5 * 24
        assert (frame.values >= 0).all()
        by_hour = frame.values.reshape(5, 24)
        assert (by_hour[:, 0] == 0).all()
        assert (by_hour[:, 23] == 0).all()
        assert by_hour[:, 12].max() > 0


def test_generation_is_reproducible():
    first = generate_frames(default_sites(2), days=3, seed=7)
    second = generate_frames(default_sites(2), days=3, seed=7)
    for household in first:
        np.testing.assert_array_equal(first[household].values, second[household].values)


def test_clear_sky_profile_bounds():
    profile = clear_sky_profile(96, np.array([0, 172]))
    assert profile.shape == (2, 96)
    assert profile.min() >= 0 and profile.max() <= 1
    # 夏至の方が日が長い
    assert (profile[1] > 0).sum() > (profile[0] > 0).sum()


@pytest.mark.parametrize("technique", ["Poly1", "Poly3"])
def test_recovers_known_quantiles(technique):
    """近傍変換 + 非交差多項式回帰で、既知の条件付き分位点の被覆率を再現する"""
    X, y = heteroscedastic_pairs(5000, seed=0)
    learning_set = LearningSet(
        X=X, y=y, descriptors=[FeatureDescriptor("P", 0)], household_id="synthetic", origins=np.arange(5000)
    )
    table = pairwise_neighbors(X, compute_weights(X), 100)
    targets = transform_targets(learning_set, table, GRID)
    model_set = get_technique(technique).fit_quantiles(
        learning_set, targets, FeatureSpec(max_lag=0, n_features=1, selected=(0,))
    )

    X_test, y_test = heteroscedastic_pairs(10_000, seed=1)
    predictions = model_set.predict_batch(X_test)
    assert (np.diff(predictions, axis=1) >= 0).all()
    for q in (0.1, 0.5, 0.9):
        j = int(round(q * 100)) - 1
        assert abs(reliability_deviation_quantile(y_test, predictions[:, j], q)) <= 0.03
        # 真の分位点を当てはめた場合も同じ範囲
        assert abs(reliability_deviation_quantile(y_test, heteroscedastic_quantile(X_test, q), q)) <= 0.03
