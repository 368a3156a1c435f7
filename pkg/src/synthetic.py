"""
合成データプロバイダー

実データがない開発環境・テストで使う、太陽光発電らしい周期時系列と
条件付き分位点が既知の不等分散データを生成します。
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from .config import Config
from .dataset import TimeSeriesFrame

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticSite:
    """合成する1世帯の特性"""
    household_id: str
    capacity: float = 1.0
    shade_start: float = 0.0     # 日の出からの割合
    shade_length: float = 0.0
    shade_depth: float = 0.0
    cloudiness: float = 0.35


def clear_sky_profile(steps_per_day: int, day_of_year: np.ndarray) -> np.ndarray:
    """
    晴天時の日内プロファイル（日の出〜日の入りの正弦波、日長は季節変化）

    Args:
        steps_per_day: 1日のステップ数
        day_of_year: 各日の通日 (D)

    Returns:
        np.ndarray: (D×steps_per_day) の [0, 1] の値
    """
    hours = (np.arange(steps_per_day) + 0.5) * 24.0 / steps_per_day
    day_length = 12.0 + 2.0 * np.cos(2.0 * np.pi * (day_of_year - 172) / 365.0)
    sunrise = 12.0 - day_length / 2.0
    phase = (hours[None, :] - sunrise[:, None]) / day_length[:, None]
    profile = np.sin(np.pi * phase)
    profile[(phase <= 0) | (phase >= 1)] = 0.0
    return profile


def generate_household(
    site: SyntheticSite,
    days: int,
    steps_per_day: int = 96,
    start_day_of_year: int = 182,
    rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """
    1世帯分の発電量系列を生成

    日ごとの雲量係数（AR(1)）と、雲量に応じて大きくなる日内の乗法ノイズを持つ。

    Args:
        site: 世帯の特性
        days: 日数
        steps_per_day: 1日のステップ数
        start_day_of_year: 開始日の通日
        rng: 乱数生成器

    Returns:
        np.ndarray: 長さ days·steps_per_day の非負の系列
    """
    rng = rng or np.random.default_rng(0)
    day_of_year = (start_day_of_year + np.arange(days)) % 365
    profile = clear_sky_profile(steps_per_day, day_of_year)

    # 日ごとの雲量（0 = 快晴）
    latent = np.empty(days)
    latent[0] = rng.normal()
    for d in range(1, days):
        latent[d] = 0.6 * latent[d - 1] + np.sqrt(1 - 0.6 ** 2) * rng.normal()
    cloud = site.cloudiness * stats.norm.cdf(latent)

    noise = rng.normal(size=profile.shape) * (0.02 + 0.5 * cloud[:, None])
    power = profile * (1.0 - cloud[:, None]) * np.clip(1.0 + noise, 0.0, None)

    if site.shade_length > 0:
        phase = np.linspace(0.0, 1.0, steps_per_day)
        shaded = (phase >= site.shade_start) & (phase < site.shade_start + site.shade_length)
        power[:, shaded] *= 1.0 - site.shade_depth

    return site.capacity * power.reshape(-1)


def default_sites(count: int = 2) -> List[SyntheticSite]:
    """同梱サンプル用の世帯設定"""
    sites = []
    for i in range(count):
        sites.append(SyntheticSite(
            household_id=f"H{i + 1:03d}",
            capacity=2.0 + 1.5 * i,
            shade_start=0.30 + 0.05 * i,
            shade_length=0.05 if i % 2 == 0 else 0.0,
            shade_depth=0.4,
            cloudiness=0.3 + 0.1 * (i % 3),
        ))
    return sites


def generate_frames(
    sites: List[SyntheticSite],
    days: int,
    resolution_minutes: int = 15,
    start: str = "2010-07-01",
    seed: int = 0
) -> Dict[str, TimeSeriesFrame]:
    """
    複数世帯の合成時系列を生成（未正規化）

    Args:
        sites: 世帯の特性
        days: 日数
        resolution_minutes: Δt [分]
        start: 開始日時
        seed: 乱数シード

    Returns:
        Dict[str, TimeSeriesFrame]: 世帯ID -> 時系列
    """
    rng = np.random.default_rng(seed)
    steps_per_day = (24 * 60) // resolution_minutes
    start_ts = pd.Timestamp(start)
    frames = {}
    for site in sites:
        values = generate_household(
            site, days, steps_per_day, start_day_of_year=start_ts.dayofyear, rng=rng
        )
        frames[site.household_id] = TimeSeriesFrame(
            household_id=site.household_id,
            values=values,
            start=start_ts,
            resolution_minutes=resolution_minutes,
        )
    return frames


def write_wide_csv(frames: Dict[str, TimeSeriesFrame], path: Path, timestamp_column: str = "timestamp") -> Path:
    """
    timestamp 列 + 世帯列のワイド形式CSVに書き出す

    Args:
        frames: 同じ時刻軸を持つ時系列
        path: 保存先
        timestamp_column: タイムスタンプ列名

    Returns:
        Path: 書き出したファイル
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    first = next(iter(frames.values()))
    table = pd.DataFrame({timestamp_column: first.timestamps.strftime("%Y-%m-%d %H:%M:%S")})
    for household, frame in frames.items():
        table[household] = frame.values
    table.to_csv(path, index=False, float_format=Config.float_format())
    logger.info(f"Wrote synthetic sample: {path} ({len(frames)} households, {len(table)} rows)")
    return path


def heteroscedastic_pairs(n: int, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    条件付き分位点が既知の不等分散データ

    時刻 t を一様に取り、入力 s = sin(π t)（日内の晴天プロファイル）、
    出力 y = 0.1 + 0.7 s + (0.02 + 0.1 s)·ε, ε ~ N(0, 1)。

    Args:
        n: サンプル数
        seed: 乱数シード

    Returns:
        Tuple[np.ndarray, np.ndarray]: (X (n×1), y (n))
    """
    rng = np.random.default_rng(seed)
    s = np.sin(np.pi * rng.uniform(size=n))
    y = 0.1 + 0.7 * s + (0.02 + 0.1 * s) * rng.normal(size=n)
    return s[:, None], y


def heteroscedastic_quantile(X: np.ndarray, q: float) -> np.ndarray:
    """heteroscedastic_pairs の真の条件付き q 分位点"""
    s = np.asarray(X, dtype=float)[:, 0]
    return 0.1 + 0.7 * s + (0.02 + 0.1 * s) * stats.norm.ppf(q)
