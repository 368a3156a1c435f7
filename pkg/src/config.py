"""
設定ファイル

プロセス全体の設定（ログ、キャッシュ、並列数）は環境変数または .env で管理し、
実験ごとの設定（RunConfig）は YAML ファイルから読み込む。
"""

import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

# .envファイルを読み込み
env_path = Path(__file__).parent.parent / '.env'
load_dotenv(dotenv_path=env_path)


class ConfigError(ValueError):
    """設定の検証エラー"""


class Layout(str, Enum):
    """入力CSVのレイアウト"""
    WIDE = "wide"    # timestamp列 + 世帯ごとの値列
    LONG = "long"    # timestamp列 + 世帯列 + 値列


class NeighborBackend(str, Enum):
    """近傍探索の実装"""
    AUTO = "auto"
    BRUTE = "brute"
    KDTREE = "kdtree"


class Config:
    """プロセス設定"""

    # ログ設定
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
    LOG_FILE = os.getenv("LOG_FILE", "knn_quantile.log")
    LOG_FORMAT = os.getenv("LOG_FORMAT", "%(asctime)s - %(name)s - %(levelname)s - %(message)s")

    # 出力・キャッシュ設定
    OUTPUT_DIR = os.getenv("OUTPUT_DIR", "./runs")
    CACHE_DIR = os.getenv("CACHE_DIR", "")  # 空なら <output_dir>/cache
    ENABLE_CACHE = os.getenv("ENABLE_CACHE", "true").lower() == "true"

    # 並列実行
    DEFAULT_WORKERS = int(os.getenv("DEFAULT_WORKERS", "1"))

    # CSV/JSONに書き出す有効桁数
    FLOAT_DIGITS = int(os.getenv("FLOAT_DIGITS", "17"))

    @classmethod
    def float_format(cls) -> str:
        """CSV用の浮動小数点フォーマット"""
        return f"%.{cls.FLOAT_DIGITS}g"

    @classmethod
    def resolve_cache_dir(cls, output_dir: str) -> Path:
        """
        キャッシュディレクトリを決定

        Args:
            output_dir: 実行結果の出力ディレクトリ

        Returns:
            Path: キャッシュディレクトリ
        """
        if cls.CACHE_DIR:
            return Path(cls.CACHE_DIR)
        return Path(output_dir) / "cache"

    @classmethod
    def get_info(cls) -> dict:
        """設定情報を取得"""
        return {
            "log_level": cls.LOG_LEVEL,
            "log_file": cls.LOG_FILE,
            "output_dir": cls.OUTPUT_DIR,
            "cache_dir": cls.CACHE_DIR or None,
            "cache_enabled": cls.ENABLE_CACHE,
            "default_workers": cls.DEFAULT_WORKERS,
            "float_digits": cls.FLOAT_DIGITS,
        }


# ---------------------------------------------------------------------------
# 実験設定 (YAML)
# ---------------------------------------------------------------------------

class DataSection(BaseModel):
    """入力データ設定"""
    path: str = "./sample_data/pv_sample.csv"
    layout: Layout = Layout.WIDE
    timestamp_column: str = "timestamp"
    household_column: str = "household"
    value_column: str = "value"
    resolution_minutes: int = Field(15, ge=1)
    max_gap_steps: int = Field(4, ge=0)
    households: Optional[List[str]] = None
    delimiter: str = ","


class FeatureSection(BaseModel):
    """特徴量設定"""
    horizon: int = Field(96, ge=1)            # H
    max_lag: int = Field(96, ge=0)            # H1
    period: int = Field(96, ge=1)             # H_p
    window_days: int = Field(7, ge=0)         # m
    night_threshold: float = Field(1e-4, ge=0.0)
    n_features: int = Field(4, ge=1)          # S


class KnnSection(BaseModel):
    """近傍による目的変数変換の設定"""
    neighbors: List[int] = Field(default_factory=lambda: [50, 70, 100, 120])
    include_self: bool = True
    backend: NeighborBackend = NeighborBackend.AUTO
    epsilon: float = Field(1e-12, gt=0.0)

    @field_validator("neighbors")
    @classmethod
    def _check_neighbors(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("neighbors must not be empty")
        if any(k < 1 for k in value):
            raise ValueError(f"neighbors must be >= 1: {value}")
        return sorted(set(value))


class RegressionSection(BaseModel):
    """多項式分位点回帰の設定"""
    degrees: List[int] = Field(default_factory=lambda: [1, 2, 3])
    ridge: float = Field(1e-8, ge=0.0)
    tolerance: float = Field(1e-9, gt=0.0)
    max_iter: int = Field(500, ge=1)
    holdout_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    holdout: Literal["chronological", "random"] = "chronological"

    @field_validator("degrees")
    @classmethod
    def _check_degrees(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("degrees must not be empty")
        if any(d not in (1, 2, 3) for d in value):
            raise ValueError(f"degrees must be in {{1, 2, 3}}: {value}")
        return sorted(set(value))


class EvaluationSection(BaseModel):
    """評価設定"""
    quantile_step: float = Field(0.01, gt=0.0, lt=0.5)
    export_transformed_targets: bool = False
    export_learning_sets: bool = True

    @field_validator("quantile_step")
    @classmethod
    def _check_step(cls, value: float) -> float:
        count = round(1.0 / value)
        if abs(count * value - 1.0) > 1e-9:
            raise ValueError(f"quantile_step must divide 1: {value}")
        return value


class RunSection(BaseModel):
    """実行設定"""
    output_dir: str = Field(default_factory=lambda: Config.OUTPUT_DIR)
    workers: int = Field(default_factory=lambda: Config.DEFAULT_WORKERS, ge=1)
    seed: int = 0
    train_fraction: float = Field(0.5, gt=0.0, lt=1.0)


class ReportSection(BaseModel):
    """レポート設定（扇形図データ）"""
    fan_household: Optional[str] = None
    fan_day: int = Field(0, ge=0)
    fan_technique: Optional[str] = None
    fan_knn: Optional[int] = None


class RunConfig(BaseModel):
    """1回の実験の設定"""
    data: DataSection = Field(default_factory=DataSection)
    features: FeatureSection = Field(default_factory=FeatureSection)
    knn: KnnSection = Field(default_factory=KnnSection)
    regression: RegressionSection = Field(default_factory=RegressionSection)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)
    run: RunSection = Field(default_factory=RunSection)
    report: ReportSection = Field(default_factory=ReportSection)

    @model_validator(mode="after")
    def _check_fan(self) -> "RunConfig":
        if self.report.fan_knn is not None and self.report.fan_knn not in self.knn.neighbors:
            raise ValueError(f"report.fan_knn {self.report.fan_knn} not in knn.neighbors")
        techniques = [f"Poly{d}" for d in self.regression.degrees]
        if self.report.fan_technique is not None and self.report.fan_technique not in techniques:
            raise ValueError(f"report.fan_technique {self.report.fan_technique} not in {techniques}")
        return self

    def quantile_grid(self) -> List[float]:
        """
        分位点グリッドを取得

        Returns:
            List[float]: 0.01, 0.02, ..., 0.99（ステップ設定に従う）
        """
        step = self.evaluation.quantile_step
        count = round(1.0 / step)
        return [round(i * step, 10) for i in range(1, count)]

    def with_overrides(
        self,
        households: Optional[List[str]] = None,
        knn: Optional[List[int]] = None,
        degrees: Optional[List[int]] = None,
        out: Optional[str] = None,
        workers: Optional[int] = None,
        seed: Optional[int] = None
    ) -> "RunConfig":
        """
        CLIフラグで上書きした設定を返す

        Args:
            households: 対象世帯
            knn: 近傍数のリスト
            degrees: 多項式次数のリスト
            out: 出力ディレクトリ
            workers: 並列数
            seed: 乱数シード

        Returns:
            RunConfig: 上書き後の設定（再検証済み）
        """
        raw = self.model_dump(mode="json")
        if households:
            raw["data"]["households"] = list(households)
        if knn:
            raw["knn"]["neighbors"] = list(knn)
        if degrees:
            raw["regression"]["degrees"] = list(degrees)
        if out:
            raw["run"]["output_dir"] = out
        if workers is not None:
            raw["run"]["workers"] = workers
        if seed is not None:
            raw["run"]["seed"] = seed

        # 上書きで対象外になった扇形図の指定はデフォルト（先頭の世帯・手法・近傍数）に戻す
        report = raw["report"]
        if households and report.get("fan_household") not in households:
            report["fan_household"] = None
        if knn and report.get("fan_knn") not in knn:
            report["fan_knn"] = None
        if degrees and report.get("fan_technique") not in [f"Poly{d}" for d in degrees]:
            report["fan_technique"] = None
        return parse_run_config(raw)

    def to_yaml(self) -> str:
        """YAML文字列に変換"""
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True, allow_unicode=True)

    def section_digest(self, *sections: str) -> Dict[str, Any]:
        """
        キャッシュキー用に指定セクションだけを取り出す

        Args:
            sections: "features", "knn" などのセクション名

        Returns:
            Dict[str, Any]: セクション名 -> 内容
        """
        dumped = self.model_dump(mode="json")
        return {name: dumped[name] for name in sections}


def parse_run_config(raw: Optional[Dict[str, Any]]) -> RunConfig:
    """
    辞書から RunConfig を生成

    Args:
        raw: YAMLを読み込んだ辞書（Noneなら全てデフォルト）

    Returns:
        RunConfig: 検証済み設定

    Raises:
        ConfigError: 検証に失敗した場合
    """
    try:
        return RunConfig.model_validate(raw or {})
    except ValidationError as e:
        raise ConfigError(f"不正な設定: {e}") from e


def load_run_config(path: Optional[str] = None) -> RunConfig:
    """
    YAMLファイルから実験設定を読み込む

    Args:
        path: 設定ファイルのパス（Noneならデフォルト設定）

    Returns:
        RunConfig: 検証済み設定

    Raises:
        ConfigError: ファイルが読めない、または検証に失敗した場合
    """
    if path is None:
        return parse_run_config({})

    try:
        with open(path, 'r', encoding='utf-8') as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"設定ファイルが見つかりません: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"設定ファイルのパースに失敗しました: {path}: {e}") from e

    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"設定ファイルのトップレベルはマッピングである必要があります: {path}")

    return parse_run_config(raw)
