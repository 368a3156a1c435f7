"""
評価モジュール

テスト期間の昼間ペアについて、分位点回帰と区間の信頼度偏差・ピンボール損失を計算し、
世帯・分位点を通して集計します。
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

# 集計指標（表の順番）
METRICS = {
    "quantile_reliability": ("quantile", "reliability_deviation"),
    "quantile_pinball": ("quantile", "pinball"),
    "interval_reliability": ("interval", "reliability_deviation"),
    "interval_pinball": ("interval", "pinball"),
}


class EvaluationError(ValueError):
    """評価のエラー"""


@dataclass(frozen=True)
class IntervalPair:
    """上側・下側の分位点回帰から作る予測区間"""
    q_upper: float
    q_lower: float
    upper: np.ndarray
    lower: np.ndarray

    def __post_init__(self):
        if not self.q_upper > self.q_lower:
            raise EvaluationError(f"q_u > q_l である必要があります: q_u={self.q_upper}, q_l={self.q_lower}")
        if len(self.upper) != len(self.lower):
            raise EvaluationError("上側と下側の予測の長さが一致しません")

    @property
    def coverage(self) -> float:
        """名目被覆率 q_u - q_l"""
        return round(self.q_upper - self.q_lower, 10)

    @property
    def symmetric(self) -> bool:
        return abs(self.q_upper - (1.0 - self.q_lower)) <= 1e-9


def _check(y: np.ndarray, prediction: np.ndarray):
    y = np.asarray(y, dtype=float)
    prediction = np.asarray(prediction, dtype=float)
    if y.size == 0:
        raise EvaluationError("評価対象が空です")
    if y.shape != prediction.shape:
        raise EvaluationError(f"長さが一致しません: {y.shape} != {prediction.shape}")
    return y, prediction


def reliability_deviation_quantile(y: np.ndarray, prediction: np.ndarray, q: float) -> float:
    """
    ΔRl_q = card(y_n < ŷ_q,n) / N - q

    Args:
        y: 真値
        prediction: 分位点 q の予測
        q: 名目被覆率

    Returns:
        float: 信頼度偏差（[-q, 1-q]）
    """
    y, prediction = _check(y, prediction)
    return float(np.mean(y < prediction) - q)


def pinball_quantile(y: np.ndarray, prediction: np.ndarray, q: float) -> float:
    """
    L_q = mean{(y_n - ŷ_q,n)(q - I(y_n < ŷ_q,n))}

    Args:
        y: 真値
        prediction: 分位点 q の予測
        q: 分位点

    Returns:
        float: ピンボール損失（非負）
    """
    y, prediction = _check(y, prediction)
    error = y - prediction
    return float(np.mean(error * (q - (y < prediction))))


def reliability_deviation_interval(y: np.ndarray, pair: IntervalPair) -> float:
    """
    ΔRl = card(ŷ_l ≤ y < ŷ_u) / N - (q_u - q_l)（下端を含み上端を含まない）

    Args:
        y: 真値
        pair: 予測区間

    Returns:
        float: 信頼度偏差
    """
    y, upper = _check(y, pair.upper)
    lower = np.asarray(pair.lower, dtype=float)
    inside = (lower <= y) & (y < upper)
    return float(np.mean(inside) - (pair.q_upper - pair.q_lower))


def pinball_interval(y: np.ndarray, pair: IntervalPair) -> float:
    """
    区間のピンボール損失（幅 + 2/(1-(q_u-q_l)) × 区間外への逸脱）

    Args:
        y: 真値
        pair: 予測区間（q_u = 1 - q_l）

    Returns:
        float: 区間ピンボール損失

    Raises:
        EvaluationError: q_u ≠ 1 - q_l の場合
    """
    if not pair.symmetric:
        raise EvaluationError(f"区間ピンボール損失には q_u = 1 - q_l が必要です: q_u={pair.q_upper}, q_l={pair.q_lower}")
    y, upper = _check(y, pair.upper)
    lower = np.asarray(pair.lower, dtype=float)
    weight = 2.0 / (1.0 - (pair.q_upper - pair.q_lower))
    loss = (
        (upper - lower)
        + weight * (y - upper) * (y > upper)
        + weight * (lower - y) * (y < lower)
    )
    return float(np.mean(loss))


def full_grid(step: float = 0.01) -> List[float]:
    """step 刻みの分位点グリッド（0 と 1 を除く）"""
    count = round(1.0 / step)
    return [round(i * step, 10) for i in range(1, count)]


def build_intervals(
    predictions: np.ndarray,
    grid: Sequence[float],
    step: float = 0.01
) -> List[IntervalPair]:
    """
    中央から外側へ (0.51, 0.49), ..., (0.99, 0.01) の対称区間を作る

    Args:
        predictions: (n×Q) 分位点予測
        grid: predictions の列に対応する分位点
        step: グリッドの刻み

    Returns:
        List[IntervalPair]: 名目被覆率の昇順（step=0.01 なら 49 区間）

    Raises:
        EvaluationError: グリッドが欠けている場合
    """
    predictions = np.atleast_2d(np.asarray(predictions, dtype=float))
    columns = {round(float(q), 9): j for j, q in enumerate(grid)}
    expected = full_grid(step)
    missing = [q for q in expected if round(q, 9) not in columns]
    if missing:
        raise EvaluationError(f"分位点グリッドが欠けています: {missing}")
    if predictions.shape[1] != len(grid):
        raise EvaluationError(f"予測の列数 {predictions.shape[1]} がグリッド長 {len(grid)} と一致しません")

    pairs = []
    for q_upper in expected:
        if q_upper <= 0.5 + 1e-12:
            continue
        q_lower = round(1.0 - q_upper, 10)
        pairs.append(IntervalPair(
            q_upper=q_upper,
            q_lower=q_lower,
            upper=predictions[:, columns[round(q_upper, 9)]],
            lower=predictions[:, columns[round(q_lower, 9)]],
        ))
    return pairs


@dataclass
class EvalReport:
    """
    1世帯・1手法・1近傍数の評価結果

    Attributes:
        grid: 分位点
        reliability_q: ΔRl_q
        pinball_q: L_q
        coverages: 区間の名目被覆率
        reliability_interval: 区間の ΔRl
        pinball_interval: 区間の L
        n_evaluated: 評価した昼間ペア数
        n_night: 除外した夜間ペア数
    """
    grid: np.ndarray
    reliability_q: np.ndarray
    pinball_q: np.ndarray
    coverages: np.ndarray
    reliability_interval: np.ndarray
    pinball_interval: np.ndarray
    n_evaluated: int
    n_night: int = 0

    @property
    def mean_abs_reliability_q(self) -> float:
        return float(np.mean(np.abs(self.reliability_q)))

    @property
    def mean_pinball_q(self) -> float:
        return float(np.mean(self.pinball_q))

    @property
    def mean_abs_reliability_interval(self) -> float:
        return float(np.mean(np.abs(self.reliability_interval)))

    @property
    def mean_pinball_interval(self) -> float:
        return float(np.mean(self.pinball_interval))

    @property
    def mean_signed_reliability_interval(self) -> float:
        """負なら区間が狭い（過小被覆）傾向"""
        return float(np.mean(self.reliability_interval))

    def to_frame(self, household: str, technique: str, k: int) -> pd.DataFrame:
        """
        縦持ちの表に変換

        Returns:
            pd.DataFrame: household, technique, k_nn, kind, level, metric, value
        """
        blocks = [
            ("quantile", self.grid, "reliability_deviation", self.reliability_q),
            ("quantile", self.grid, "pinball", self.pinball_q),
            ("interval", self.coverages, "reliability_deviation", self.reliability_interval),
            ("interval", self.coverages, "pinball", self.pinball_interval),
        ]
        frames = [
            pd.DataFrame({
                "household": household,
                "technique": technique,
                "k_nn": k,
                "kind": kind,
                "level": np.round(levels, 10),
                "metric": metric,
                "value": values,
            })
            for kind, levels, metric, values in blocks
        ]
        return pd.concat(frames, ignore_index=True)


def evaluate(
    y: np.ndarray,
    predictions: np.ndarray,
    grid: Sequence[float],
    night: Optional[np.ndarray] = None,
    step: float = 0.01
) -> EvalReport:
    """
    昼間ペアのみで分位点回帰と区間を評価

    Args:
        y: 真値 (n)
        predictions: 分位点予測 (n×Q)
        grid: 分位点
        night: 夜間フラグ (n)
        step: グリッドの刻み

    Returns:
        EvalReport: 評価結果

    Raises:
        EvaluationError: 昼間ペアがない場合
    """
    y = np.asarray(y, dtype=float)
    predictions = np.atleast_2d(np.asarray(predictions, dtype=float))
    day = np.ones(len(y), dtype=bool) if night is None else ~np.asarray(night, dtype=bool)
    if not day.any():
        raise EvaluationError("評価できる昼間ペアがありません")

    y_day = y[day]
    predictions_day = predictions[day]
    grid = np.asarray(grid, dtype=float)

    reliability_q = np.array([
        reliability_deviation_quantile(y_day, predictions_day[:, j], q) for j, q in enumerate(grid)
    ])
    pinball_q = np.array([
        pinball_quantile(y_day, predictions_day[:, j], q) for j, q in enumerate(grid)
    ])

    pairs = build_intervals(predictions_day, grid, step)
    return EvalReport(
        grid=grid,
        reliability_q=reliability_q,
        pinball_q=pinball_q,
        coverages=np.array([pair.coverage for pair in pairs]),
        reliability_interval=np.array([reliability_deviation_interval(y_day, pair) for pair in pairs]),
        pinball_interval=np.array([pinball_interval(y_day, pair) for pair in pairs]),
        n_evaluated=int(day.sum()),
        n_night=int((~day).sum()),
    )


def aggregate(per_level: pd.DataFrame) -> pd.DataFrame:
    """
    世帯 × 水準を通して平均し、手法 × 近傍数ごとの要約を作る

    信頼度偏差は絶対値の平均、ピンボール損失は平均。値は百分率。
    区間の符号付き平均信頼度偏差も interval_reliability_signed として出力する。

    Args:
        per_level: EvalReport.to_frame を連結した表

    Returns:
        pd.DataFrame: technique, k_nn, metric, value_percent
    """
    if per_level.empty:
        raise EvaluationError("集計対象の評価結果がありません")

    rows = []
    for (technique, k), group in per_level.groupby(["technique", "k_nn"], sort=True):
        for name, (kind, metric) in METRICS.items():
            values = group[(group["kind"] == kind) & (group["metric"] == metric)]["value"].to_numpy()
            if metric == "reliability_deviation":
                values = np.abs(values)
            rows.append({"technique": technique, "k_nn": int(k), "metric": name, "value_percent": 100.0 * values.mean()})
        signed = group[(group["kind"] == "interval") & (group["metric"] == "reliability_deviation")]["value"]
        rows.append({
            "technique": technique,
            "k_nn": int(k),
            "metric": "interval_reliability_signed",
            "value_percent": 100.0 * signed.mean(),
        })
    return pd.DataFrame(rows, columns=["technique", "k_nn", "metric", "value_percent"])


def summary_table(summary: pd.DataFrame, metric: str) -> pd.DataFrame:
    """
    要約を行 = 近傍数、列 = 手法の表にする

    Args:
        summary: aggregate の結果
        metric: 指標名

    Returns:
        pd.DataFrame: k_nn をインデックスとする表
    """
    selected = summary[summary["metric"] == metric]
    if selected.empty:
        raise EvaluationError(f"指標 {metric} の集計結果がありません")
    return selected.pivot(index="k_nn", columns="technique", values="value_percent").sort_index()


def curves(per_level: pd.DataFrame) -> pd.DataFrame:
    """
    世帯平均の水準別曲線（符号付き）

    Returns:
        pd.DataFrame: technique, k_nn, kind, level, metric, value
    """
    return (
        per_level.groupby(["technique", "k_nn", "kind", "level", "metric"], sort=True)["value"]
        .mean()
        .reset_index()
    )


def per_household(per_level: pd.DataFrame) -> pd.DataFrame:
    """世帯ごとの要約（百分率）"""
    rows: List[Dict] = []
    for (household, technique, k), group in per_level.groupby(["household", "technique", "k_nn"], sort=True):
        for name, (kind, metric) in METRICS.items():
            values = group[(group["kind"] == kind) & (group["metric"] == metric)]["value"].to_numpy()
            if metric == "reliability_deviation":
                values = np.abs(values)
            rows.append({
                "household": household,
                "technique": technique,
                "k_nn": int(k),
                "metric": name,
                "value_percent": 100.0 * values.mean(),
            })
    return pd.DataFrame(rows, columns=["household", "technique", "k_nn", "metric", "value_percent"])
