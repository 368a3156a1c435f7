"""
レポート作成モジュール

実行ディレクトリの評価結果から、手法 × 近傍数の要約表、名目被覆率ごとの曲線データ、
世帯別の要約、夜間判定の精度、1日分の分位点予測（扇形図データ）をCSVに書き出します。
"""

import logging
from pathlib import Path
from typing import List

import pandas as pd
import yaml

from .config import Config, RunConfig, parse_run_config
from .evaluation import METRICS, aggregate, curves, per_household, summary_table
from .pipeline import Manifest, load_predictions, quantile_column

logger = logging.getLogger(__name__)

# 要約表のファイル名（METRICS の順）
TABLE_FILES = {
    "quantile_reliability": "table1_quantile_reliability.csv",
    "quantile_pinball": "table2_quantile_pinball.csv",
    "interval_reliability": "table3_interval_reliability.csv",
    "interval_pinball": "table4_interval_pinball.csv",
}

REPORT_DIR = "report"


class ReportError(RuntimeError):
    """レポートに必要な成果物がない"""

    def __init__(self, missing: List[str]):
        self.missing = list(missing)
        super().__init__("成果物がありません: " + ", ".join(self.missing))


def _require(manifest: Manifest, relative: str, missing: List[str]) -> None:
    entry = manifest.entries.get(relative)
    if entry is None or not entry.valid or not (manifest.run_dir / relative).exists():
        missing.append(relative)


def _load_run_config(run_dir: Path) -> RunConfig:
    with open(run_dir / "config.yaml", 'r', encoding='utf-8') as f:
        return parse_run_config(yaml.safe_load(f))


def _write(frame: pd.DataFrame, manifest: Manifest, name: str, index: bool = False) -> Path:
    relative = f"{REPORT_DIR}/{name}"
    path = manifest.run_dir / relative
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=index, float_format=Config.float_format())
    manifest.record(relative, "report")
    return path


def _curve_tables(per_level: pd.DataFrame) -> dict:
    """(kind, metric) ごとに 行 = 水準、列 = 手法_knn の表"""
    averaged = curves(per_level)
    averaged["series"] = averaged["technique"] + "_knn" + averaged["k_nn"].astype(str)
    tables = {}
    for kind, metric in METRICS.values():
        selected = averaged[(averaged["kind"] == kind) & (averaged["metric"] == metric)]
        tables[f"curve_{kind}_{metric}.csv"] = selected.pivot(index="level", columns="series", values="value").sort_index()
    return tables


def fan_data(
    run_dir: Path,
    household: str,
    technique: str,
    k: int,
    day: int,
    grid: List[float]
) -> pd.DataFrame:
    """
    テスト期間の day 日目について全分位点の予測を取り出す

    Args:
        run_dir: 実行ディレクトリ
        household: 世帯ID
        technique: 手法名
        k: 近傍数
        day: テスト期間の予測対象日（0始まり、予測ファイルに現れる日付の順）
        grid: 分位点

    Returns:
        pd.DataFrame: target_time, y, is_night, q0.01..q0.99

    Raises:
        ReportError: 予測ファイルがない、または日が範囲外の場合
    """
    relative = f"predictions/{household}_{technique}_knn{k}.csv"
    path = Path(run_dir) / relative
    if not path.exists():
        raise ReportError([relative])

    table = load_predictions(path, grid)
    dates = table.times.dt.normalize()
    days = sorted(dates.unique())
    if day >= len(days):
        raise ReportError([f"{relative} (day {day} / {len(days)} days)"])

    rows = (dates == days[day]).to_numpy()
    fan = pd.DataFrame({
        "target_time": table.times[rows].dt.strftime("%Y-%m-%d %H:%M:%S").to_numpy(),
        "y": table.y[rows],
        "is_night": table.night[rows].astype(int),
    })
    quantiles = pd.DataFrame(table.predictions[rows], columns=[quantile_column(q) for q in grid])
    return pd.concat([fan, quantiles], axis=1)


def report(run_dir: Path) -> List[Path]:
    """
    実行ディレクトリの評価結果から表と図用データを作る

    Args:
        run_dir: パイプラインの実行ディレクトリ

    Returns:
        List[Path]: 書き出したファイル

    Raises:
        ReportError: 必要な成果物がない場合（不足分を列挙）
    """
    run_dir = Path(run_dir)
    try:
        manifest = Manifest.load(run_dir)
    except FileNotFoundError:
        raise ReportError([str(run_dir / Manifest.FILENAME)])

    missing: List[str] = []
    _require(manifest, "config.yaml", missing)
    _require(manifest, "evaluation/per_level.csv", missing)
    _require(manifest, "evaluation/night_accuracy.csv", missing)
    if missing:
        raise ReportError(missing)

    config = _load_run_config(run_dir)
    per_level = pd.read_csv(
        run_dir / "evaluation/per_level.csv", dtype={"household": str}, float_precision="round_trip"
    )
    logger.info(f"Building report for {run_dir.name} ({per_level['household'].nunique()} households)")

    written: List[Path] = []
    summary = aggregate(per_level)
    written.append(_write(summary, manifest, "summary.csv"))
    for metric, name in TABLE_FILES.items():
        written.append(_write(summary_table(summary, metric), manifest, name, index=True))
    for name, table in _curve_tables(per_level).items():
        written.append(_write(table, manifest, name, index=True))
    written.append(_write(per_household(per_level), manifest, "per_household.csv"))

    night = pd.read_csv(run_dir / "evaluation/night_accuracy.csv", dtype={"household": str}, float_precision="round_trip")
    written.append(_write(night[["household", "precision", "agreement"]], manifest, "night_accuracy.csv"))

    fan_settings = config.report
    households = sorted(per_level["household"].astype(str).unique())
    household = fan_settings.fan_household if fan_settings.fan_household in households else households[0]
    technique = fan_settings.fan_technique or f"Poly{config.regression.degrees[0]}"
    k = fan_settings.fan_knn or config.knn.neighbors[0]
    fan = fan_data(run_dir, household, technique, k, fan_settings.fan_day, config.quantile_grid())
    written.append(_write(fan, manifest, f"fan_{household}_{technique}_knn{k}_day{fan_settings.fan_day}.csv"))

    manifest.save()
    logger.info(f"Report written: {len(written)} files under {run_dir / REPORT_DIR}")
    return written
