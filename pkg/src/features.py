"""
特徴量モジュール

発電量 P から 8日間の最大値系列 P_max と平均値系列 P_mean を作り、
遅れ特徴量で学習ペア (X, y) を組み立て、夜間のペアを判定します。
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import Config, FeatureSection
from .dataset import TimeSeriesFrame

logger = logging.getLogger(__name__)

SOURCES = ("P", "P_max", "P_mean")


class FeatureError(ValueError):
    """特徴量作成のエラー"""


@dataclass(frozen=True)
class FeatureDescriptor:
    """学習行列の1列 = (元系列, 遅れ)"""
    source: str
    lag: int

    @property
    def name(self) -> str:
        return f"{self.source}[k]" if self.lag == 0 else f"{self.source}[k-{self.lag}]"

    def to_dict(self) -> Dict:
        return {"source": self.source, "lag": self.lag}

    @classmethod
    def from_dict(cls, data: Dict) -> "FeatureDescriptor":
        return cls(source=str(data["source"]), lag=int(data["lag"]))


@dataclass(frozen=True)
class FeatureSpec:
    """
    特徴量の指定

    Attributes:
        horizon: 予測ホライズン H [ステップ]
        max_lag: 最大遅れ H1 [ステップ]
        period: 1日の周期 H_p [ステップ]
        window_days: 窓の日数 - 1 (m)
        n_features: 選択する特徴量数 S
        selected: 候補集合の中で選択された特徴量のインデックス
    """
    horizon: int = 96
    max_lag: int = 96
    period: int = 96
    window_days: int = 7
    n_features: int = 4
    selected: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.horizon < 1 or self.max_lag < 0 or self.period < 1 or self.window_days < 0:
            raise FeatureError(
                f"不正な特徴量指定: H={self.horizon}, H1={self.max_lag}, "
                f"H_p={self.period}, m={self.window_days}"
            )
        if len(set(self.selected)) != len(self.selected):
            raise FeatureError(f"選択された特徴量が重複しています: {self.selected}")
        pool = self.pool_size
        if any(i < 0 or i >= pool for i in self.selected):
            raise FeatureError(f"選択された特徴量が候補集合の範囲外です: {self.selected} (候補数 {pool})")

    @classmethod
    def from_section(cls, section: FeatureSection) -> "FeatureSpec":
        """設定セクションから生成"""
        return cls(
            horizon=section.horizon,
            max_lag=section.max_lag,
            period=section.period,
            window_days=section.window_days,
            n_features=section.n_features,
        )

    @property
    def pool_size(self) -> int:
        """候補数 3·(H1+1)"""
        return len(SOURCES) * (self.max_lag + 1)

    def descriptors(self) -> List[FeatureDescriptor]:
        """選択済み特徴量の記述子"""
        pool = candidate_pool(self)
        return [pool[i] for i in self.selected]

    def with_selection(self, selected: Sequence[int]) -> "FeatureSpec":
        return replace(self, selected=tuple(int(i) for i in selected))


def candidate_pool(spec: FeatureSpec) -> List[FeatureDescriptor]:
    """
    候補特徴量の一覧（元系列ごとに遅れ 0..H1 の順）

    Args:
        spec: 特徴量指定

    Returns:
        List[FeatureDescriptor]: 3·(H1+1) 個の記述子
    """
    return [FeatureDescriptor(source, lag) for source in SOURCES for lag in range(spec.max_lag + 1)]


@dataclass(frozen=True)
class DerivedSeries:
    """P と派生系列（利用不可の位置は NaN）"""
    P: np.ndarray
    P_max: np.ndarray
    P_mean: np.ndarray

    def source(self, name: str) -> np.ndarray:
        if name not in SOURCES:
            raise FeatureError(f"未知の元系列: {name}")
        return getattr(self, name)


@dataclass
class LearningSet:
    """
    学習ペアの集合

    Attributes:
        X: 入力行列 (N×S)
        y: 目的変数 (N)
        descriptors: 各列の記述子
        household_id: 世帯ID
        origins: 各行の基準インデックス k（元系列でのグローバル値）
        dropped: 利用不可の成分があったため除外した行数
    """
    X: np.ndarray
    y: np.ndarray
    descriptors: List[FeatureDescriptor]
    household_id: str
    origins: np.ndarray
    dropped: int = 0
    horizon: int = 96

    @property
    def N(self) -> int:
        return len(self.y)

    @property
    def S(self) -> int:
        return self.X.shape[1]

    @property
    def targets(self) -> np.ndarray:
        """各行の目的変数のインデックス k+H"""
        return self.origins + self.horizon

    def subset(self, rows: np.ndarray) -> "LearningSet":
        """
        行を絞り込んだ学習ペアを返す

        Args:
            rows: 真偽値マスクまたはインデックス配列

        Returns:
            LearningSet: 絞り込み後の学習ペア
        """
        return replace(self, X=self.X[rows], y=self.y[rows], origins=self.origins[rows])


@dataclass(frozen=True)
class NightMask:
    """学習ペアごとの夜間フラグ"""
    flags: np.ndarray
    threshold: float = 1e-4

    @property
    def day(self) -> np.ndarray:
        return ~self.flags

    def __len__(self) -> int:
        return len(self.flags)


# ---------------------------------------------------------------------------
# 派生系列
# ---------------------------------------------------------------------------

def _daily_stack(values: np.ndarray, period: int, window_days: int) -> Tuple[np.ndarray, int]:
    """P[k], P[k-H_p], ..., P[k-m·H_p] を縦に並べる（先頭インデックスも返す）"""
    first = window_days * period
    K = len(values)
    if K <= first:
        return np.empty((window_days + 1, 0)), first
    stack = np.stack([values[first - j * period:K - j * period] for j in range(window_days + 1)])
    return stack, first


def rolling_max(frame: TimeSeriesFrame, period: int = 96, window_days: int = 7) -> np.ndarray:
    """
    P_max[k] = max{P[k], P[k-H_p], ..., P[k-m·H_p]}

    Args:
        frame: 時系列
        period: H_p
        window_days: m

    Returns:
        np.ndarray: 長さ K の系列（k < m·H_p は NaN）
    """
    result = np.full(frame.K, np.nan)
    stack, first = _daily_stack(frame.values, period, window_days)
    if stack.shape[1]:
        result[first:] = stack.max(axis=0)
    return result


def rolling_mean(frame: TimeSeriesFrame, period: int = 96, window_days: int = 7) -> np.ndarray:
    """
    P_mean[k] = mean{P[k], P[k-H_p], ..., P[k-m·H_p]}

    Args:
        frame: 時系列
        period: H_p
        window_days: m

    Returns:
        np.ndarray: 長さ K の系列（k < m·H_p は NaN）
    """
    result = np.full(frame.K, np.nan)
    stack, first = _daily_stack(frame.values, period, window_days)
    if stack.shape[1]:
        result[first:] = stack.mean(axis=0)
    return result


def derive(frame: TimeSeriesFrame, spec: FeatureSpec) -> DerivedSeries:
    """P, P_max, P_mean をまとめて作成"""
    return DerivedSeries(
        P=np.asarray(frame.values, dtype=float),
        P_max=rolling_max(frame, spec.period, spec.window_days),
        P_mean=rolling_mean(frame, spec.period, spec.window_days),
    )


# ---------------------------------------------------------------------------
# 学習ペア
# ---------------------------------------------------------------------------

def _local_origins(K: int, spec: FeatureSpec) -> np.ndarray:
    """H1 ≤ k ≤ K-1-H を満たす基準インデックス（0始まり）"""
    return np.arange(spec.max_lag, K - spec.horizon)


def gather_columns(
    derived: DerivedSeries,
    descriptors: Sequence[FeatureDescriptor],
    local_origins: np.ndarray
) -> np.ndarray:
    """
    記述子に従って入力行列を組み立てる

    Args:
        derived: 元系列と派生系列
        descriptors: 列の記述子
        local_origins: 基準インデックス（0始まり）

    Returns:
        np.ndarray: (len(local_origins) × len(descriptors))
    """
    X = np.empty((len(local_origins), len(descriptors)))
    for column, descriptor in enumerate(descriptors):
        X[:, column] = derived.source(descriptor.source)[local_origins - descriptor.lag]
    return X


def assemble(
    frame: TimeSeriesFrame,
    P_max: np.ndarray,
    P_mean: np.ndarray,
    spec: FeatureSpec,
    descriptors: Optional[Sequence[FeatureDescriptor]] = None,
    min_origin: int = 0
) -> LearningSet:
    """
    学習ペア (X, y) を組み立てる

    x_n は選択された遅れの P, P_max, P_mean、y_n = P[k+H]。
    利用不可な成分を含む行は除外して数える。

    Args:
        frame: 時系列
        P_max: rolling_max の結果
        P_mean: rolling_mean の結果
        spec: 特徴量指定（selected を使う）
        descriptors: 列の記述子（指定時は spec.selected より優先）
        min_origin: これより前の基準インデックスを使わない（0始まり）

    Returns:
        LearningSet: 学習ペア

    Raises:
        FeatureError: 行が1つも残らない場合
    """
    if descriptors is None:
        descriptors = spec.descriptors()
    descriptors = list(descriptors)

    origins = _local_origins(frame.K, spec)
    if origins.size == 0:
        raise FeatureError(
            f"{frame.household_id}: 学習ペアを作れません (K={frame.K}, H={spec.horizon}, H1={spec.max_lag})"
        )
    origins = origins[origins >= min_origin]

    derived = DerivedSeries(P=np.asarray(frame.values, dtype=float), P_max=P_max, P_mean=P_mean)
    X = gather_columns(derived, descriptors, origins)
    y = derived.P[origins + spec.horizon]

    available = np.isfinite(X).all(axis=1) & np.isfinite(y)
    dropped = int((~available).sum())
    if dropped:
        logger.debug(f"{frame.household_id}: 利用不可の成分を含む {dropped} 行を除外しました")

    if not available.any():
        raise FeatureError(f"{frame.household_id}: 利用可能な学習ペアがありません")

    return LearningSet(
        X=X[available],
        y=y[available],
        descriptors=descriptors,
        household_id=frame.household_id,
        origins=origins[available] + frame.offset,
        dropped=dropped,
        horizon=spec.horizon,
    )


def pool_min_origin(spec: FeatureSpec) -> int:
    """全ての候補特徴量が利用可能になる最初の基準インデックス"""
    return spec.max_lag + spec.window_days * spec.period


def night_min_origin(spec: FeatureSpec) -> int:
    """前日の同時刻 k-H_p が系列内にあり、夜間判定ができる最初の基準インデックス"""
    return spec.period


class CandidatePool:
    """
    前方特徴量選択の候補集合

    列は必要になった時点で取り出し、全候補の行列は作らない。
    """

    def __init__(self, frame: TimeSeriesFrame, derived: DerivedSeries, spec: FeatureSpec):
        self.frame = frame
        self.derived = derived
        self.spec = spec
        self.descriptors = candidate_pool(spec)

    def __len__(self) -> int:
        return len(self.descriptors)

    def columns(self, indices: Sequence[int], origins: np.ndarray) -> np.ndarray:
        """
        指定候補の列を取り出す

        Args:
            indices: 候補インデックス
            origins: 基準インデックス（グローバル値）

        Returns:
            np.ndarray: (len(origins) × len(indices))
        """
        local = np.asarray(origins) - self.frame.offset
        return gather_columns(self.derived, [self.descriptors[i] for i in indices], local)


# ---------------------------------------------------------------------------
# 夜間判定
# ---------------------------------------------------------------------------

def night_mask(
    frame: TimeSeriesFrame,
    learning_set: LearningSet,
    spec: FeatureSpec,
    tau: float = 1e-4
) -> NightMask:
    """
    ホライズンの 24h/48h 前の発電量が両方とも τ 以下なら夜間と判定

    H=H_p=96 のとき P[k] と P[k-H_p] が目的時刻 k+H の 24h/48h 前の値になる。
    k-H_p が系列の前にある行は昼間扱い。

    Args:
        frame: 時系列
        learning_set: 判定対象の学習ペア
        spec: 特徴量指定
        tau: しきい値（以下を含む）

    Returns:
        NightMask: 学習ペアと同じ長さのフラグ
    """
    P = frame.values
    local = learning_set.origins - frame.offset
    previous = local - spec.period

    flags = P[local] <= tau
    has_previous = previous >= 0
    flags &= has_previous
    flags[has_previous] &= P[previous[has_previous]] <= tau

    return NightMask(flags=flags, threshold=tau)


def night_accuracy(learning_set: LearningSet, mask: NightMask) -> Dict[str, float]:
    """
    夜間判定の精度

    Args:
        learning_set: 学習ペア（真値 y を使う）
        mask: 夜間フラグ

    Returns:
        Dict[str, float]:
            precision: 夜間と判定したうち真値が τ 以下の割合
            agreement: 判定と y ≤ τ の一致率
            night_count: 夜間と判定した数
    """
    truly_night = learning_set.y <= mask.threshold
    flagged = mask.flags
    night_count = int(flagged.sum())
    precision = float(truly_night[flagged].mean()) if night_count else 1.0
    agreement = float((truly_night == flagged).mean()) if len(flagged) else 1.0
    return {"precision": precision, "agreement": agreement, "night_count": night_count}


def export_learning_set(learning_set: LearningSet, mask: Optional[NightMask], path: Path) -> Path:
    """
    学習ペアをCSVに書き出す

    Args:
        learning_set: 学習ペア
        mask: 夜間フラグ（Noneなら全て昼間）
        path: 保存先

    Returns:
        Path: 書き出したファイル
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    table = pd.DataFrame({"origin_k": learning_set.origins})
    for column in range(learning_set.S):
        table[f"x{column + 1}"] = learning_set.X[:, column]
    table["y"] = learning_set.y
    table["is_night"] = (mask.flags if mask is not None else np.zeros(learning_set.N, dtype=bool)).astype(int)
    table.to_csv(path, index=False, float_format=Config.float_format())
    return path


def load_learning_set(
    path: Path,
    descriptors: Sequence[FeatureDescriptor],
    household_id: str,
    horizon: int = 96,
    threshold: float = 1e-4
) -> Tuple[LearningSet, NightMask]:
    """
    export_learning_set で書き出したCSVを読み込む

    Args:
        path: CSVのパス
        descriptors: 各列の記述子（x1..xS に対応）
        household_id: 世帯ID
        horizon: 予測ホライズン H
        threshold: 夜間しきい値

    Returns:
        Tuple[LearningSet, NightMask]: 学習ペアと夜間フラグ

    Raises:
        FeatureError: 列が欠けている場合
    """
    table = pd.read_csv(path, float_precision="round_trip")
    columns = [f"x{i + 1}" for i in range(len(descriptors))]
    missing = [c for c in ["origin_k", *columns, "y", "is_night"] if c not in table.columns]
    if missing:
        raise FeatureError(f"{path}: 列がありません: {missing}")

    learning_set = LearningSet(
        X=table[columns].to_numpy(dtype=float).reshape(len(table), len(columns)),
        y=table["y"].to_numpy(dtype=float),
        descriptors=list(descriptors),
        household_id=household_id,
        origins=table["origin_k"].to_numpy(dtype=np.int64),
        horizon=horizon,
    )
    mask = NightMask(flags=table["is_night"].to_numpy(dtype=int).astype(bool), threshold=threshold)
    return learning_set, mask
