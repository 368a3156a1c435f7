"""
予測パイプライン（サービス層）

取り込み → 特徴量選択 → 学習ペア作成 → 近傍変換 → 分位点回帰 → 予測 → 評価 を
段階ごとにキャッシュしながら実行し、実行ディレクトリに成果物とマニフェストを書き出します。
"""

import hashlib
import json
import logging
import shutil
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel

from .artifact_cache import ArtifactCache, cache_key, canonical_json, file_hash
from .config import Config, RunConfig
from .dataset import IngestionError, SplitSpec, TimeSeriesFrame, ingest, load_frames, normalize, save_frames, split
from .evaluation import EvaluationError, evaluate
from .features import (
    CandidatePool,
    DerivedSeries,
    FeatureSpec,
    LearningSet,
    NightMask,
    assemble,
    derive,
    export_learning_set,
    load_learning_set,
    night_accuracy,
    night_mask,
    night_min_origin,
    pool_min_origin,
)
from .knn_quantile import (
    compute_weights,
    export_transformed_targets,
    load_targets,
    pairwise_neighbors,
    save_targets,
    transform_targets,
)
from .regression import PolynomialTechnique, forward_select, get_technique, load_model_set, save_model_set

logger = logging.getLogger(__name__)

# 段階（実行順）
STAGES = ("ingest", "select", "assemble", "knn", "fit", "predict", "evaluate")

# サブコマンド -> 最後に実行する段階
SUBCOMMAND_STAGES = {
    "ingest": "ingest",
    "train": "fit",
    "predict": "predict",
    "evaluate": "evaluate",
    "run": "evaluate",
}


class StageError(RuntimeError):
    """段階の失敗（段階名・世帯・原因を保持）"""

    def __init__(self, stage: str, household: Optional[str], cause: str):
        self.stage = stage
        self.household = household
        self.cause = cause
        where = f" {household}" if household else ""
        super().__init__(f"[{stage}]{where}: {cause}")

    def __reduce__(self):
        return (self.__class__, (self.stage, self.household, self.cause))


# ---------------------------------------------------------------------------
# マニフェスト
# ---------------------------------------------------------------------------

class ManifestEntry(BaseModel):
    """実行ディレクトリ内の1ファイル"""
    sha256: str
    stage: str
    household: Optional[str] = None
    valid: bool = True
    cache_hit: bool = False


class Manifest:
    """実行ディレクトリの成果物一覧（相対パス -> ハッシュ・段階・有効フラグ）"""

    FILENAME = "manifest.json"

    def __init__(self, run_dir: Path, entries: Optional[Dict[str, ManifestEntry]] = None, stages: Optional[Dict] = None):
        self.run_dir = Path(run_dir)
        self.entries: Dict[str, ManifestEntry] = dict(entries or {})
        self.stages: Dict = dict(stages or {})

    def record(
        self,
        relative: str,
        stage: str,
        household: Optional[str] = None,
        valid: bool = True,
        cache_hit: bool = False
    ) -> ManifestEntry:
        """
        書き出したファイルを登録

        Args:
            relative: 実行ディレクトリからの相対パス
            stage: 段階名
            household: 世帯ID
            valid: 有効な成果物か（失敗した世帯の途中成果物は False）
            cache_hit: キャッシュから取り出したか

        Returns:
            ManifestEntry: 登録内容
        """
        entry = ManifestEntry(
            sha256=file_hash(self.run_dir / relative),
            stage=stage,
            household=household,
            valid=valid,
            cache_hit=cache_hit,
        )
        self.entries[relative] = entry
        return entry

    def invalidate(self, household: str):
        """世帯の成果物を無効にする"""
        for entry in self.entries.values():
            if entry.household == household:
                entry.valid = False

    def verify(self) -> List[str]:
        """
        ハッシュが一致しない、または存在しないファイルを返す

        Returns:
            List[str]: 問題のある相対パス
        """
        problems = []
        for relative, entry in sorted(self.entries.items()):
            path = self.run_dir / relative
            if not path.exists() or file_hash(path) != entry.sha256:
                problems.append(relative)
        return problems

    def save(self) -> Path:
        path = self.run_dir / self.FILENAME
        document = {
            "run": self.run_dir.name,
            "saved_at": datetime.now(timezone.utc).isoformat(),
            "process": Config.get_info(),
            "stages": self.stages,
            "artifacts": {name: entry.model_dump() for name, entry in sorted(self.entries.items())},
        }
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(document, f, ensure_ascii=False, indent=2)
            f.write("\n")
        return path

    @classmethod
    def load(cls, run_dir: Path) -> "Manifest":
        """
        実行ディレクトリからマニフェストを読み込む

        Raises:
            FileNotFoundError: manifest.json がない場合
        """
        run_dir = Path(run_dir)
        with open(run_dir / cls.FILENAME, 'r', encoding='utf-8') as f:
            document = json.load(f)
        entries = {
            name: ManifestEntry.model_validate(raw) for name, raw in document.get("artifacts", {}).items()
        }
        return cls(run_dir, entries, document.get("stages"))


def latest_run(output_dir: str) -> Optional[Path]:
    """出力ディレクトリ内で最新の実行ディレクトリ"""
    runs = sorted(p for p in Path(output_dir).glob("run-*") if p.is_dir())
    return runs[-1] if runs else None


# ---------------------------------------------------------------------------
# 予測ファイル
# ---------------------------------------------------------------------------

def quantile_column(q: float) -> str:
    """予測CSVの分位点列名 (q0.01 など)"""
    return f"q{q:.10g}"


@dataclass
class PredictionTable:
    """予測CSVの内容"""
    origins: np.ndarray
    targets: np.ndarray
    times: pd.Series
    night: np.ndarray
    y: np.ndarray
    predictions: np.ndarray


def export_predictions(
    learning_set: LearningSet,
    mask: NightMask,
    predictions: np.ndarray,
    grid: Sequence[float],
    frame: TimeSeriesFrame,
    path: Path
) -> Path:
    """
    テスト期間の分位点予測をCSVに書き出す

    列は origin_k, target_k, target_time, is_night, y, q0.01..q0.99。

    Args:
        learning_set: テスト用の学習ペア
        mask: 夜間フラグ
        predictions: (n×Q) 予測
        grid: 分位点
        frame: 学習ペアを作った時系列（時刻の復元に使う）
        path: 保存先

    Returns:
        Path: 書き出したファイル
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    local_targets = learning_set.targets - frame.offset
    table = pd.DataFrame({
        "origin_k": learning_set.origins,
        "target_k": learning_set.targets,
        "target_time": frame.timestamps[local_targets].strftime("%Y-%m-%d %H:%M:%S"),
        "is_night": mask.flags.astype(int),
        "y": learning_set.y,
    })
    quantiles = pd.DataFrame(predictions, columns=[quantile_column(q) for q in grid])
    table = pd.concat([table, quantiles], axis=1)
    table.to_csv(path, index=False, float_format=Config.float_format())
    return path


def load_predictions(path: Path, grid: Sequence[float]) -> PredictionTable:
    """
    export_predictions で書き出したCSVを読み込む

    Raises:
        EvaluationError: 分位点列が欠けている場合
    """
    table = pd.read_csv(path, float_precision="round_trip")
    columns = [quantile_column(q) for q in grid]
    missing = [c for c in columns if c not in table.columns]
    if missing:
        raise EvaluationError(f"{path}: 分位点列がありません: {missing[:5]}")
    return PredictionTable(
        origins=table["origin_k"].to_numpy(dtype=np.int64),
        targets=table["target_k"].to_numpy(dtype=np.int64),
        times=pd.to_datetime(table["target_time"]),
        night=table["is_night"].to_numpy(dtype=int).astype(bool),
        y=table["y"].to_numpy(dtype=float),
        predictions=table[columns].to_numpy(dtype=float),
    )


def frame_digest(frame: TimeSeriesFrame) -> str:
    """時系列の内容ハッシュ（値・時刻軸・スケール）"""
    values = hashlib.sha256(np.ascontiguousarray(frame.values).tobytes()).hexdigest()
    payload = {
        "household": frame.household_id,
        "values": values,
        "start": frame.start.isoformat(),
        "resolution_minutes": frame.resolution_minutes,
        "scale": repr(frame.scale),
        "offset": frame.offset,
    }
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# 世帯ごとの処理
# ---------------------------------------------------------------------------

@dataclass
class StagedArtifact:
    """キャッシュ内のファイルと、実行ディレクトリでの配置先"""
    stage: str
    source: Path
    relative: str
    cache_hit: bool


@dataclass
class HouseholdOutcome:
    """1世帯分の処理結果"""
    household: str
    artifacts: List[StagedArtifact] = field(default_factory=list)
    evaluations: List[Path] = field(default_factory=list)
    hits: Dict[str, List[bool]] = field(default_factory=dict)
    night: Optional[Dict] = None
    error: Optional[StageError] = None


class HouseholdWorker:
    """1世帯について select 以降の段階を実行する"""

    def __init__(self, frame: TimeSeriesFrame, config: RunConfig, cache: ArtifactCache, until: str = "evaluate"):
        self.frame = frame
        self.config = config
        self.cache = cache
        self.household = frame.household_id
        self.spec = FeatureSpec.from_section(config.features)
        self.tau = config.features.night_threshold
        self.grid = np.asarray(config.quantile_grid(), dtype=float)
        self.last = STAGES.index(until)
        self.digest = frame_digest(frame)
        self.outcome = HouseholdOutcome(household=self.household)
        self.train: Optional[TimeSeriesFrame] = None
        self.test: Optional[TimeSeriesFrame] = None
        self._derived: Dict[str, DerivedSeries] = {}

    def _reaches(self, stage: str) -> bool:
        return STAGES.index(stage) <= self.last

    @contextmanager
    def _stage(self, stage: str):
        try:
            yield
        except StageError:
            raise
        except Exception as e:
            logger.error(f"{self.household}: 段階 {stage} で失敗しました: {type(e).__name__}: {e}")
            raise StageError(stage, self.household, f"{type(e).__name__}: {e}") from e

    def _cached(self, stage: str, payload: Dict, produce: Callable[[Path], None]) -> Tuple[Path, Dict, bool]:
        """
        キャッシュにあれば再利用し、なければ produce でエントリを作る

        Returns:
            Tuple[Path, Dict, bool]: (エントリのディレクトリ, メタデータ, キャッシュヒットか)
        """
        key = cache_key(stage, payload)
        hit = self.cache.has(stage, key)
        if hit:
            meta = self.cache.load_meta(stage, key)
        else:
            produce(self.cache.prepare(stage, key))
            meta = self.cache.commit(stage, key, {"household": self.household})
        self.outcome.hits.setdefault(stage, []).append(hit)
        logger.info(f"{self.household} {stage} {key[:12]}: {'cache hit' if hit else 'computed'}")
        return self.cache.entry_dir(stage, key), meta, hit

    def _publish(self, stage: str, entry: Path, name: str, relative: str, hit: bool):
        self.outcome.artifacts.append(StagedArtifact(stage, entry / name, relative, hit))

    def _derive(self, which: str) -> DerivedSeries:
        if which not in self._derived:
            self._derived[which] = derive(self.train if which == "train" else self.test, self.spec)
        return self._derived[which]

    def run(self) -> HouseholdOutcome:
        """
        全ての手法・近傍数について段階を実行

        Returns:
            HouseholdOutcome: 成果物の一覧。失敗した場合は error に StageError
        """
        try:
            with self._stage("ingest"):
                self.train, self.test = split(
                    self.frame,
                    SplitSpec(self.config.run.train_fraction),
                    self.spec.horizon,
                    self.spec.max_lag,
                )
            if self._reaches("assemble"):
                with self._stage("assemble"):
                    self.outcome.night = self._night_accuracy()
            for degree in self.config.regression.degrees:
                self._run_technique(get_technique(f"Poly{degree}"))
        except StageError as e:
            self.outcome.error = e
        return self.outcome

    def _night_accuracy(self) -> Dict:
        derived = self._derive("test")
        base = assemble(
            self.test, derived.P_max, derived.P_mean, self.spec,
            descriptors=[], min_origin=night_min_origin(self.spec)
        )
        accuracy = night_accuracy(base, night_mask(self.test, base, self.spec, self.tau))
        accuracy["pairs"] = base.N
        return accuracy

    def _run_technique(self, technique: PolynomialTechnique):
        config = self.config
        tag = f"{self.household}_{technique.name}"
        common = {
            "household": self.household,
            "frame": self.digest,
            "features": config.section_digest("features")["features"],
            "train_fraction": config.run.train_fraction,
        }

        with self._stage("select"):
            regression = config.regression
            payload = {
                **common,
                "technique": technique.name,
                "ridge": regression.ridge,
                "holdout_fraction": regression.holdout_fraction,
                "holdout": regression.holdout,
                "seed": config.run.seed if regression.holdout == "random" else None,
            }
            entry, select_meta, hit = self._cached("select", payload, lambda e: self._select(technique, e))
            self._publish("select", entry, "selection.json", f"selection/{tag}.json", hit)
            with open(entry / "selection.json", 'r', encoding='utf-8') as f:
                selected = self.spec.with_selection(json.load(f)["indices"])

        if not self._reaches("assemble"):
            return

        with self._stage("assemble"):
            payload = {**common, "selection": select_meta["files"], "tau": self.tau}
            assemble_entry, assemble_meta, hit = self._cached(
                "assemble", payload, lambda e: self._assemble(selected, e)
            )
            if config.evaluation.export_learning_sets:
                for which in ("train", "test"):
                    self._publish("assemble", assemble_entry, f"{which}.csv", f"learning_sets/{tag}_{which}.csv", hit)

        loaded: Dict[str, Tuple[LearningSet, NightMask]] = {}

        def learning(which: str) -> Tuple[LearningSet, NightMask]:
            if which not in loaded:
                loaded[which] = load_learning_set(
                    assemble_entry / f"{which}.csv",
                    selected.descriptors(),
                    self.household,
                    self.spec.horizon,
                    self.tau,
                )
            return loaded[which]

        def day_train() -> LearningSet:
            learning_set, mask = learning("train")
            return learning_set.subset(mask.day)

        for k in config.knn.neighbors:
            if not self._reaches("knn"):
                return
            tag_k = f"{tag}_knn{k}"

            with self._stage("knn"):
                payload = {
                    "assemble": assemble_meta["files"],
                    "k": k,
                    "include_self": config.knn.include_self,
                    "epsilon": config.knn.epsilon,
                    "grid": [float(q) for q in self.grid],
                    "export": config.evaluation.export_transformed_targets,
                }
                knn_entry, knn_meta, hit = self._cached("knn", payload, lambda e: self._transform(day_train(), k, e))
                if config.evaluation.export_transformed_targets:
                    self._publish("knn", knn_entry, "targets.csv", f"targets/{tag_k}.csv", hit)

            if not self._reaches("fit"):
                continue

            with self._stage("fit"):
                payload = {
                    "knn": knn_meta["files"],
                    "technique": technique.name,
                    "selected": list(selected.selected),
                    "ridge": config.regression.ridge,
                    "tolerance": config.regression.tolerance,
                    "max_iter": config.regression.max_iter,
                    "tau": self.tau,
                }
                fit_entry, fit_meta, hit = self._cached(
                    "fit", payload, lambda e: self._fit(technique, day_train(), knn_entry, k, selected, e)
                )
                self._publish("fit", fit_entry, "model.json", f"models/{tag_k}.json", hit)

            if not self._reaches("predict"):
                continue

            with self._stage("predict"):
                payload = {"fit": fit_meta["files"], "assemble": assemble_meta["files"]}
                predict_entry, predict_meta, hit = self._cached(
                    "predict", payload, lambda e: self._predict(fit_entry, learning("test"), e)
                )
                self._publish("predict", predict_entry, "predictions.csv", f"predictions/{tag_k}.csv", hit)

            if not self._reaches("evaluate"):
                continue

            with self._stage("evaluate"):
                payload = {"predict": predict_meta["files"], "step": config.evaluation.quantile_step}
                evaluate_entry, _, hit = self._cached(
                    "evaluate", payload, lambda e: self._evaluate(technique.name, k, predict_entry, e)
                )
                self.outcome.evaluations.append(evaluate_entry / "per_level.csv")

    def _select(self, technique: PolynomialTechnique, entry: Path):
        derived = self._derive("train")
        pool = CandidatePool(self.train, derived, self.spec)
        base = assemble(
            self.train, derived.P_max, derived.P_mean, self.spec,
            descriptors=[], min_origin=max(pool_min_origin(self.spec), night_min_origin(self.spec))
        )
        mask = night_mask(self.train, base, self.spec, self.tau)
        regression = self.config.regression
        result = forward_select(
            base.subset(mask.day),
            pool,
            self.spec.n_features,
            technique.scorer(regression.ridge),
            holdout_fraction=regression.holdout_fraction,
            holdout=regression.holdout,
            seed=self.config.run.seed,
        )
        document = {
            "household": self.household,
            "technique": technique.name,
            "indices": result.indices,
            "features": [pool.descriptors[i].to_dict() for i in result.indices],
            "step_scores": result.step_scores,
            "trace": result.trace,
        }
        with open(entry / "selection.json", 'w', encoding='utf-8') as f:
            json.dump(document, f, ensure_ascii=False, indent=2)
            f.write("\n")

    def _assemble(self, selected: FeatureSpec, entry: Path):
        for which, frame in (("train", self.train), ("test", self.test)):
            derived = self._derive(which)
            learning_set = assemble(
                frame, derived.P_max, derived.P_mean, selected, min_origin=night_min_origin(selected)
            )
            mask = night_mask(frame, learning_set, selected, self.tau)
            if learning_set.dropped:
                logger.warning(f"{self.household} {which}: 利用不可の成分で {learning_set.dropped} 行を除外しました")
            export_learning_set(learning_set, mask, entry / f"{which}.csv")

    def _transform(self, day: LearningSet, k: int, entry: Path):
        knn = self.config.knn
        weights = compute_weights(day.X, knn.epsilon)
        table = pairwise_neighbors(day.X, weights, k, include_self=knn.include_self, backend=knn.backend)
        targets = transform_targets(day, table, self.grid)
        save_targets(targets, entry / "targets.npy")
        if self.config.evaluation.export_transformed_targets:
            export_transformed_targets(targets, entry / "targets.csv")

    def _fit(
        self,
        technique: PolynomialTechnique,
        day: LearningSet,
        knn_entry: Path,
        k: int,
        selected: FeatureSpec,
        entry: Path
    ):
        regression = self.config.regression
        targets = load_targets(knn_entry / "targets.npy", self.grid, k)
        model_set = technique.fit_quantiles(
            day,
            targets,
            selected,
            ridge=regression.ridge,
            tol=regression.tolerance,
            max_iter=regression.max_iter,
            night_threshold=self.tau,
        )
        save_model_set(model_set, entry / "model.json")

    def _predict(self, fit_entry: Path, test: Tuple[LearningSet, NightMask], entry: Path):
        learning_set, mask = test
        model_set = load_model_set(fit_entry / "model.json")
        predictions = model_set.predict_batch(learning_set.X, mask.flags)
        export_predictions(learning_set, mask, predictions, self.grid, self.test, entry / "predictions.csv")

    def _evaluate(self, technique: str, k: int, predict_entry: Path, entry: Path):
        table = load_predictions(predict_entry / "predictions.csv", self.grid)
        report = evaluate(table.y, table.predictions, self.grid, night=table.night, step=self.config.evaluation.quantile_step)
        logger.info(
            f"{self.household} {technique} k={k}: "
            f"ΔRl_q={100 * report.mean_abs_reliability_q:.2f}% L_q={100 * report.mean_pinball_q:.2f}% "
            f"(昼間 {report.n_evaluated} / 夜間 {report.n_night})"
        )
        report.to_frame(self.household, technique, k).to_csv(
            entry / "per_level.csv", index=False, float_format=Config.float_format()
        )


def process_household(frame: TimeSeriesFrame, config: RunConfig, cache: ArtifactCache, until: str) -> HouseholdOutcome:
    """並列実行用のエントリポイント"""
    return HouseholdWorker(frame, config, cache, until).run()


# ---------------------------------------------------------------------------
# パイプライン
# ---------------------------------------------------------------------------

@dataclass
class PipelineResult:
    """
    パイプラインの実行結果

    Attributes:
        run_dir: 実行ディレクトリ
        manifest: 成果物一覧
        stage_hits: 段階 -> 各実行のキャッシュヒット
    """
    run_dir: Path
    manifest: Manifest
    stage_hits: Dict[str, List[bool]]

    def cache_hit(self, stage: str) -> bool:
        hits = self.stage_hits.get(stage)
        return bool(hits) and all(hits)

    @property
    def all_cached(self) -> bool:
        return all(self.cache_hit(stage) for stage in self.stage_hits)

    def summary(self) -> Dict[str, str]:
        """段階 -> "ヒット数/実行数" """
        return {stage: f"{sum(hits)}/{len(hits)}" for stage, hits in self.stage_hits.items()}


class ForecastPipeline:
    """予測パイプラインクラス"""

    def __init__(self, config: RunConfig, cache: Optional[ArtifactCache] = None):
        """
        初期化

        Args:
            config: 検証済みの実験設定
            cache: 成果物キャッシュ（Noneなら Config から作成）
        """
        self.config = config
        self.output_dir = Path(config.run.output_dir)
        self.cache = cache or ArtifactCache(
            str(Config.resolve_cache_dir(str(self.output_dir))),
            enabled=Config.ENABLE_CACHE
        )
        logger.info(
            f"パイプライン初期化完了 - output: {self.output_dir}, cache: {self.cache.cache_dir}, "
            f"workers: {config.run.workers}"
        )

    def create_run_dir(self) -> Path:
        """run-<UTC時刻> の実行ディレクトリを作る"""
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
        run_dir = self.output_dir / f"run-{stamp}"
        suffix = 1
        while run_dir.exists():
            run_dir = self.output_dir / f"run-{stamp}-{suffix}"
            suffix += 1
        run_dir.mkdir(parents=True)
        return run_dir

    def _ingest(self) -> Tuple[Dict[str, TimeSeriesFrame], Path, bool]:
        data = self.config.data
        try:
            source = file_hash(Path(data.path))
        except FileNotFoundError as e:
            raise StageError("ingest", None, f"入力ファイルが見つかりません: {data.path}") from e

        section = self.config.section_digest("data")["data"]
        section.pop("path")
        key = cache_key("ingest", {"data": section, "source": source})
        entry = self.cache.entry_dir("ingest", key)
        hit = self.cache.has("ingest", key)

        try:
            if not hit:
                entry = self.cache.prepare("ingest", key)
                frames = {household: normalize(frame) for household, frame in ingest(data.path, data).items()}
                save_frames(frames, entry / "frames.csv")
                self.cache.commit("ingest", key, {"households": list(frames)})
            frames = load_frames(entry / "frames.csv")
        except IngestionError as e:
            logger.error(f"取り込みに失敗しました: {e}")
            raise StageError("ingest", e.household, str(e)) from e

        logger.info(f"ingest {key[:12]}: {'cache hit' if hit else 'computed'} ({len(frames)} households)")
        return frames, entry, hit

    def execute(self, until: str = "evaluate") -> PipelineResult:
        """
        指定段階までパイプラインを実行

        Args:
            until: 最後に実行する段階（STAGES のいずれか）

        Returns:
            PipelineResult: 実行結果

        Raises:
            StageError: いずれかの段階が失敗した場合（マニフェストは書き出し済み）
        """
        if until not in STAGES:
            raise ValueError(f"不正な段階: {until}。有効な値: {', '.join(STAGES)}")

        run_dir = self.create_run_dir()
        logger.info(f"Run directory: {run_dir}")
        (run_dir / "config.yaml").write_text(self.config.to_yaml(), encoding="utf-8")
        manifest = Manifest(run_dir)
        manifest.record("config.yaml", "config")
        stage_hits: Dict[str, List[bool]] = {}

        try:
            frames, entry, hit = self._ingest()
        except StageError:
            manifest.save()
            raise
        stage_hits["ingest"] = [hit]
        for name in ("frames.csv", "frames.json"):
            self._copy(entry / name, run_dir / "frames" / name)
            manifest.record(f"frames/{name}", "ingest", cache_hit=hit)

        outcomes: List[HouseholdOutcome] = []
        if until != "ingest":
            workers = max(1, min(self.config.run.workers, len(frames)))
            logger.info(f"{len(frames)} 世帯を {workers} ワーカーで処理します")
            outcomes = Parallel(n_jobs=workers)(
                delayed(process_household)(frame, self.config, self.cache, until) for frame in frames.values()
            )

        errors = []
        for outcome in outcomes:
            valid = outcome.error is None
            for artifact in outcome.artifacts:
                self._copy(artifact.source, run_dir / artifact.relative)
                manifest.record(artifact.relative, artifact.stage, outcome.household, valid, artifact.cache_hit)
            for stage, hits in outcome.hits.items():
                stage_hits.setdefault(stage, []).extend(hits)
            if not valid:
                errors.append(outcome.error)

        if STAGES.index(until) >= STAGES.index("assemble") and outcomes:
            self._write_night_accuracy(outcomes, manifest, valid=not errors)
        if until == "evaluate" and outcomes:
            self._write_per_level(outcomes, manifest, stage_hits, valid=not errors)

        self.cache.refresh_index()
        result = PipelineResult(run_dir=run_dir, manifest=manifest, stage_hits=stage_hits)
        manifest.stages = result.summary()
        manifest.save()

        for stage, ratio in result.summary().items():
            logger.info(f"stage {stage}: {ratio} cache hits")

        if errors:
            for error in errors:
                logger.error(f"Stage failed: {error}")
            raise errors[0]
        return result

    @staticmethod
    def _copy(source: Path, target: Path):
        target.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(source, target)

    def _write_night_accuracy(self, outcomes: List[HouseholdOutcome], manifest: Manifest, valid: bool):
        rows = [dict(household=o.household, **o.night) for o in outcomes if o.night is not None]
        if not rows:
            return
        relative = "evaluation/night_accuracy.csv"
        path = manifest.run_dir / relative
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(rows, columns=["household", "precision", "agreement", "night_count", "pairs"]).to_csv(
            path, index=False, float_format=Config.float_format()
        )
        manifest.record(relative, "assemble", valid=valid)

    def _write_per_level(
        self,
        outcomes: List[HouseholdOutcome],
        manifest: Manifest,
        stage_hits: Dict[str, List[bool]],
        valid: bool
    ):
        sources = [path for outcome in outcomes if outcome.error is None for path in outcome.evaluations]
        if not sources:
            return
        per_level = pd.concat(
            [pd.read_csv(path, dtype={"household": str}, float_precision="round_trip") for path in sources],
            ignore_index=True
        )
        relative = "evaluation/per_level.csv"
        path = manifest.run_dir / relative
        path.parent.mkdir(parents=True, exist_ok=True)
        per_level.to_csv(path, index=False, float_format=Config.float_format())
        hits = stage_hits.get("evaluate", [])
        manifest.record(relative, "evaluate", valid=valid, cache_hit=bool(hits) and all(hits))
