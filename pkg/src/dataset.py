"""
時系列データセットモジュール

CSVファイルから世帯ごとの発電量時系列を読み込み、正規化し、
学習用とテスト用の前後半に分割します。
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .config import Config, DataSection, Layout

logger = logging.getLogger(__name__)


class IngestionError(ValueError):
    """取り込み時のエラー（世帯・行・タイムスタンプを保持）"""

    def __init__(
        self,
        message: str,
        household: Optional[str] = None,
        row: Optional[int] = None,
        timestamp: Optional[str] = None
    ):
        self.household = household
        self.row = row
        self.timestamp = timestamp
        parts = [message]
        if household is not None:
            parts.append(f"household={household}")
        if row is not None:
            parts.append(f"row={row}")
        if timestamp is not None:
            parts.append(f"timestamp={timestamp}")
        super().__init__(" ".join(parts))


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class TimeSeriesFrame:
    """
    1世帯分の等間隔時系列

    Attributes:
        household_id: 世帯ID
        values: 発電量 P[k]（正規化後は [0, 1]）
        start: 先頭サンプルの時刻（タイムゾーンなし）
        resolution_minutes: サンプリング間隔 Δt [分]
        scale: 正規化に使った最大値（非正規化なら 1）
        offset: 元系列における先頭サンプルのインデックス
        exogenous: 同じインデックスに揃えた外生変数 u[k]
    """
    household_id: str
    values: np.ndarray
    start: pd.Timestamp
    resolution_minutes: int
    scale: float = 1.0
    offset: int = 0
    exogenous: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))
        object.__setattr__(
            self, "exogenous", {name: _frozen(u) for name, u in self.exogenous.items()}
        )
        for name, u in self.exogenous.items():
            if len(u) != len(self.values):
                raise IngestionError(
                    f"外生変数 {name} の長さが一致しません ({len(u)} != {len(self.values)})",
                    household=self.household_id
                )

    @property
    def K(self) -> int:
        """サンプル数"""
        return len(self.values)

    @property
    def timestamps(self) -> pd.DatetimeIndex:
        """各サンプルの時刻"""
        return pd.date_range(
            self.start, periods=self.K, freq=pd.Timedelta(minutes=self.resolution_minutes)
        )

    @property
    def steps_per_day(self) -> int:
        """1日あたりのステップ数"""
        return (24 * 60) // self.resolution_minutes


@dataclass(frozen=True)
class SplitSpec:
    """学習/テスト分割の指定"""
    train_fraction: float = 0.5

    def boundary_index(self, K: int) -> int:
        """
        分割位置を計算

        Args:
            K: サンプル数

        Returns:
            int: floor(K * train_fraction)
        """
        return int(np.floor(K * self.train_fraction))


# ---------------------------------------------------------------------------
# 取り込み
# ---------------------------------------------------------------------------

def _parse_timestamps(raw: pd.Series, household: Optional[str] = None) -> pd.Series:
    """タイムスタンプ列をパース（失敗した行を報告）"""
    parsed = pd.to_datetime(raw, errors="coerce")
    bad = parsed.isna()
    if bad.any():
        position = int(np.flatnonzero(bad.to_numpy())[0])
        raise IngestionError(
            "タイムスタンプが欠落またはパースできません",
            household=household,
            row=int(raw.index[position]) + 2,
            timestamp=str(raw.iloc[position])
        )
    if getattr(parsed.dt, "tz", None) is not None:
        parsed = parsed.dt.tz_localize(None)
    return parsed


def _parse_values(raw: pd.Series, household: str) -> pd.Series:
    """値列を数値化（空欄は欠損、それ以外でパースできない値はエラー）"""
    text = raw.astype(str).str.strip()
    missing = raw.isna() | (text == "") | text.str.lower().isin(["nan", "na"])
    numbers = pd.to_numeric(text.where(~missing), errors="coerce")
    bad = numbers.isna() & ~missing
    if bad.any():
        position = int(np.flatnonzero(bad.to_numpy())[0])
        raise IngestionError(
            f"数値に変換できません: {text.iloc[position]!r}",
            household=household,
            row=int(raw.index[position]) + 2
        )
    infinite = np.isinf(numbers.to_numpy(dtype=float, na_value=np.nan))
    if infinite.any():
        position = int(np.flatnonzero(infinite)[0])
        raise IngestionError("値が有限ではありません", household=household, row=int(raw.index[position]) + 2)
    return numbers.astype(float)


def _to_uniform_grid(
    household: str,
    timestamps: pd.Series,
    values: pd.Series,
    resolution_minutes: int,
    max_gap_steps: int
) -> TimeSeriesFrame:
    """
    1世帯分の観測を等間隔グリッドに載せ替える

    Args:
        household: 世帯ID
        timestamps: 各行の時刻（元CSVの行番号をインデックスに持つ）
        values: 各行の値
        resolution_minutes: Δt [分]
        max_gap_steps: 線形補間で埋める最大の欠損長

    Returns:
        TimeSeriesFrame: 補間済みの時系列

    Raises:
        IngestionError: 重複・逆順・グリッド外の時刻、または長すぎる欠損
    """
    if timestamps.empty:
        raise IngestionError("データ行がありません", household=household)

    duplicated = timestamps.duplicated(keep="first")
    if duplicated.any():
        position = int(np.flatnonzero(duplicated.to_numpy())[0])
        raise IngestionError(
            "タイムスタンプが重複しています",
            household=household,
            row=int(timestamps.index[position]) + 2,
            timestamp=str(timestamps.iloc[position])
        )

    decreasing = timestamps.diff() <= pd.Timedelta(0)
    if decreasing.any():
        position = int(np.flatnonzero(decreasing.to_numpy())[0])
        raise IngestionError(
            "タイムスタンプが単調増加ではありません",
            household=household,
            row=int(timestamps.index[position]) + 2,
            timestamp=str(timestamps.iloc[position])
        )

    step = pd.Timedelta(minutes=resolution_minutes)
    start = timestamps.iloc[0]
    off_grid = ((timestamps - start) % step) != pd.Timedelta(0)
    if off_grid.any():
        position = int(np.flatnonzero(off_grid.to_numpy())[0])
        raise IngestionError(
            f"タイムスタンプが {resolution_minutes} 分グリッド上にありません",
            household=household,
            row=int(timestamps.index[position]) + 2,
            timestamp=str(timestamps.iloc[position])
        )

    series = pd.Series(values.to_numpy(dtype=float), index=pd.DatetimeIndex(timestamps.to_numpy()))
    grid = pd.date_range(start, timestamps.iloc[-1], freq=step)
    series = series.reindex(grid)

    missing = series.isna().to_numpy()
    if missing.any():
        # 欠損の連続長を調べる
        run_id = np.cumsum(~missing)
        run_lengths = pd.Series(missing).groupby(run_id).transform("sum").to_numpy()
        too_long = missing & (run_lengths > max_gap_steps)
        if too_long.any():
            position = int(np.flatnonzero(too_long)[0])
            raise IngestionError(
                f"欠損が許容長 {max_gap_steps} ステップを超えています (長さ {int(run_lengths[position])})",
                household=household,
                timestamp=str(grid[position])
            )
        logger.warning(f"{household}: {int(missing.sum())} 個の欠損を線形補間します")
        series = series.interpolate(method="linear", limit_direction="both")

    return TimeSeriesFrame(
        household_id=str(household),
        values=series.to_numpy(dtype=float),
        start=pd.Timestamp(start),
        resolution_minutes=resolution_minutes
    )


def ingest(
    path: str,
    schema: DataSection,
    resolution: Optional[int] = None
) -> Dict[str, TimeSeriesFrame]:
    """
    区切り文字付きテキストファイルから世帯ごとの時系列を取り込む

    Args:
        path: ファイルパス
        schema: 列の対応（layout, timestamp_column など）
        resolution: Δt [分]（Noneなら schema.resolution_minutes）

    Returns:
        Dict[str, TimeSeriesFrame]: 世帯ID -> 時系列（ファイル内の出現順）

    Raises:
        IngestionError: 列の欠落、パース不能な値、重複・逆順の時刻、長すぎる欠損
    """
    resolution = resolution or schema.resolution_minutes
    logger.info(f"Ingesting {path} (layout={schema.layout.value}, Δt={resolution}min)")

    try:
        table = pd.read_csv(path, sep=schema.delimiter, dtype=str, keep_default_na=False)
    except FileNotFoundError as e:
        raise IngestionError(f"入力ファイルが見つかりません: {path}") from e
    except pd.errors.ParserError as e:
        raise IngestionError(f"CSVのパースに失敗しました: {path}: {e}") from e

    if schema.timestamp_column not in table.columns:
        raise IngestionError(f"タイムスタンプ列 {schema.timestamp_column!r} がありません")

    frames: Dict[str, TimeSeriesFrame] = {}

    if schema.layout == Layout.WIDE:
        timestamps = _parse_timestamps(table[schema.timestamp_column])
        households = [c for c in table.columns if c != schema.timestamp_column]
        if not households:
            raise IngestionError("世帯の値列がありません")
        for household in households:
            values = _parse_values(table[household], household)
            frames[str(household)] = _to_uniform_grid(
                str(household), timestamps, values, resolution, schema.max_gap_steps
            )
    else:
        for column in (schema.household_column, schema.value_column):
            if column not in table.columns:
                raise IngestionError(f"列 {column!r} がありません")
        for household, group in table.groupby(schema.household_column, sort=False):
            timestamps = _parse_timestamps(group[schema.timestamp_column], str(household))
            values = _parse_values(group[schema.value_column], str(household))
            frames[str(household)] = _to_uniform_grid(
                str(household), timestamps, values, resolution, schema.max_gap_steps
            )

    if schema.households:
        unknown = [h for h in schema.households if h not in frames]
        if unknown:
            raise IngestionError(f"指定された世帯が見つかりません: {unknown}")
        frames = {h: frames[h] for h in schema.households}

    logger.info(f"Ingested {len(frames)} households: " + ", ".join(f"{h}(K={f.K})" for h, f in frames.items()))
    return frames


# ---------------------------------------------------------------------------
# 正規化・分割
# ---------------------------------------------------------------------------

def normalize(frame: TimeSeriesFrame) -> TimeSeriesFrame:
    """
    世帯の全期間最大値で割って [0, 1] に正規化

    全てゼロの系列はそのまま（scale 1）。正規化済み系列に再適用しても変化しない。

    Args:
        frame: 生の時系列（非負）

    Returns:
        TimeSeriesFrame: 正規化後の時系列（scale に最大値を保持）

    Raises:
        IngestionError: 負の値が含まれる場合
    """
    values = frame.values
    if values.size and values.min() < 0:
        position = int(np.argmin(values))
        raise IngestionError(
            f"負の値は正規化できません: {values[position]}",
            household=frame.household_id,
            timestamp=str(frame.timestamps[position])
        )

    peak = float(values.max()) if values.size else 0.0
    if peak == 0.0:
        return frame

    return replace(frame, values=values / peak, scale=frame.scale * peak)


def denormalize(frame: TimeSeriesFrame) -> TimeSeriesFrame:
    """保持している scale を掛けて元の単位に戻す"""
    if frame.scale == 1.0:
        return frame
    return replace(frame, values=frame.values * frame.scale, scale=1.0)


def split(
    frame: TimeSeriesFrame,
    spec: SplitSpec,
    horizon: int = 96,
    max_lag: int = 96
) -> Tuple[TimeSeriesFrame, TimeSeriesFrame]:
    """
    時系列を連続した前半（学習）と後半（テスト）に分割

    Args:
        frame: 時系列
        spec: 分割指定
        horizon: 予測ホライズン H
        max_lag: 最大遅れ H1

    Returns:
        Tuple[TimeSeriesFrame, TimeSeriesFrame]: (train, test)

    Raises:
        IngestionError: 両側で学習ペアを1つ以上作れないほど短い場合
    """
    minimum = 2 * (horizon + max_lag + 1)
    if frame.K < minimum:
        raise IngestionError(
            f"系列が短すぎます (K={frame.K} < 2·(H+H1+1)={minimum})",
            household=frame.household_id
        )

    boundary = spec.boundary_index(frame.K)
    if min(boundary, frame.K - boundary) < horizon + max_lag + 1:
        raise IngestionError(
            f"分割後の系列が短すぎます (boundary={boundary}, K={frame.K})",
            household=frame.household_id
        )

    step = pd.Timedelta(minutes=frame.resolution_minutes)
    train = replace(
        frame,
        values=frame.values[:boundary],
        exogenous={n: u[:boundary] for n, u in frame.exogenous.items()}
    )
    test = replace(
        frame,
        values=frame.values[boundary:],
        start=frame.start + boundary * step,
        offset=frame.offset + boundary,
        exogenous={n: u[boundary:] for n, u in frame.exogenous.items()}
    )
    return train, test


# ---------------------------------------------------------------------------
# キャッシュ用の入出力
# ---------------------------------------------------------------------------

def save_frames(frames: Dict[str, TimeSeriesFrame], path: Path) -> List[Path]:
    """
    (household, k, value) 形式のCSVとメタデータJSONに保存

    Args:
        frames: 世帯ID -> 時系列
        path: CSVの保存先（同名の .json にメタデータ）

    Returns:
        List[Path]: 書き出したファイル
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    table = pd.concat(
        [
            pd.DataFrame({
                "household": frame.household_id,
                "k": np.arange(frame.K) + frame.offset,
                "value": frame.values,
            })
            for frame in frames.values()
        ],
        ignore_index=True
    )
    table.to_csv(path, index=False, float_format=Config.float_format())

    meta = {
        household: {
            "start": frame.start.isoformat(),
            "resolution_minutes": frame.resolution_minutes,
            "scale": repr(frame.scale),
            "offset": frame.offset,
        }
        for household, frame in frames.items()
    }
    meta_path = path.with_suffix(".json")
    with open(meta_path, 'w', encoding='utf-8') as f:
        json.dump(meta, f, ensure_ascii=False, indent=2, sort_keys=False)

    return [path, meta_path]


def load_frames(path: Path) -> Dict[str, TimeSeriesFrame]:
    """
    save_frames で保存した時系列を読み込む

    Args:
        path: CSVのパス

    Returns:
        Dict[str, TimeSeriesFrame]: 世帯ID -> 時系列
    """
    path = Path(path)
    table = pd.read_csv(path, dtype={"household": str}, float_precision="round_trip")
    with open(path.with_suffix(".json"), 'r', encoding='utf-8') as f:
        meta = json.load(f)

    frames = {}
    for household, info in meta.items():
        rows = table[table["household"] == household].sort_values("k")
        frames[household] = TimeSeriesFrame(
            household_id=household,
            values=rows["value"].to_numpy(dtype=float),
            start=pd.Timestamp(info["start"]),
            resolution_minutes=int(info["resolution_minutes"]),
            scale=float(info["scale"]),
            offset=int(info["offset"])
        )
    return frames
