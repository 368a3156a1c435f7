"""
多項式分位点回帰モジュール

近傍変換後の目的変数に対して、非負・非交差の制約付き最小二乗で
99本の多項式分位点回帰を順番に当てはめます。
制約なしの回帰器向けの交差補正と、前方特徴量選択も提供します。
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field
from scipy import linalg, optimize

from .features import CandidatePool, FeatureDescriptor, FeatureSpec, LearningSet
from .knn_quantile import TransformedTargets

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class RegressionError(ValueError):
    """回帰モデルの入力・設定のエラー"""


class SolverError(RuntimeError):
    """制約付き最小二乗が収束しない、または実行不能"""

    def __init__(self, message: str, q: Optional[float] = None, iterations: Optional[int] = None):
        self.q = q
        self.iterations = iterations
        super().__init__(f"{message} (q={q}, iterations={iterations})")


# ---------------------------------------------------------------------------
# 多項式展開
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolynomialSpec:
    """交差項なしの多項式 [1 | x_s^p]（s 優先、p は 1..d）"""
    degree: int
    n_features: int

    def __post_init__(self):
        if self.degree not in (1, 2, 3):
            raise RegressionError(f"次数は 1, 2, 3 のいずれかです: {self.degree}")
        if self.n_features < 0:
            raise RegressionError(f"特徴量数が不正です: {self.n_features}")

    @property
    def width(self) -> int:
        """展開後の列数 1 + S·d"""
        return 1 + self.n_features * self.degree

    def column_names(self, descriptors: Optional[Sequence[FeatureDescriptor]] = None) -> List[str]:
        names = ["1"]
        for s in range(self.n_features):
            base = descriptors[s].name if descriptors else f"x{s + 1}"
            names.extend(base if p == 1 else f"{base}^{p}" for p in range(1, self.degree + 1))
        return names


def expand(X: np.ndarray, spec: PolynomialSpec) -> np.ndarray:
    """
    入力行列を多項式の設計行列に展開

    Args:
        X: 入力行列 (N×S) または入力ベクトル (S)
        spec: 多項式指定

    Returns:
        np.ndarray: (N × (1+S·d))、列は切片、x_1, x_1^2, ..., x_S^d の順
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != spec.n_features:
        raise RegressionError(f"特徴量数が一致しません: {X.shape[1]} != {spec.n_features}")
    powers = np.arange(1, spec.degree + 1)
    expanded = (X[:, :, None] ** powers[None, None, :]).reshape(X.shape[0], -1)
    return np.hstack([np.ones((X.shape[0], 1)), expanded])


# ---------------------------------------------------------------------------
# 制約付き最小二乗（最小距離問題 + 非負最小二乗）
# ---------------------------------------------------------------------------

@dataclass
class ConstrainedFit:
    """1本の分位点回帰の解"""
    theta: np.ndarray
    multipliers: np.ndarray
    active: List[int]
    objective: float


@dataclass
class KKTResiduals:
    """KKT条件の残差（停留性・補完性は勾配の大きさでスケール）"""
    stationarity: float
    primal: float
    dual: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.complementarity)


class GramFactor:
    """G = AᵀA + λI = RᵀR のコレスキー分解（全分位点で共有）"""

    def __init__(self, A: np.ndarray, ridge: float = 1e-8):
        self.A = np.asarray(A, dtype=float)
        self.ridge = ridge
        self.G = self.A.T @ self.A + ridge * np.eye(self.A.shape[1])
        try:
            self.R = linalg.cholesky(self.G, lower=False)
        except linalg.LinAlgError as e:
            raise SolverError(f"グラム行列が正定値ではありません (ridge={ridge})") from e
        # E = A R⁻¹ の転置（最小距離問題の制約行列）
        self.E_T = linalg.solve_triangular(self.R, self.A.T, trans="T")
        self.has_intercept = bool(self.A.shape[0]) and bool(np.all(self.A[:, 0] == 1.0))

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return linalg.cho_solve((self.R, False), rhs)


def fit_mean(A: np.ndarray, y: np.ndarray, ridge: float = 1e-8) -> np.ndarray:
    """
    リッジ付き最小二乗（平均回帰）

    Args:
        A: 設計行列
        y: 目的変数
        ridge: λ

    Returns:
        np.ndarray: 係数
    """
    gram = GramFactor(A, ridge)
    return gram.solve(gram.A.T @ np.asarray(y, dtype=float))


def solve_constrained(
    gram: GramFactor,
    y: np.ndarray,
    lower: np.ndarray,
    start: Optional[np.ndarray] = None,
    tol: float = 1e-9,
    max_iter: int = 500,
    q: Optional[float] = None
) -> ConstrainedFit:
    """
    min ||y - Aθ||² + λ||θ||² s.t. Aθ ≥ lower を解く

    z = R(θ - θ_u)（θ_u は制約なしの解）と置くと、目的関数は ||z||² + 定数、
    制約は E z ≥ lower - Aθ_u（E = AR⁻¹）の最小距離問題になる。
    これを非負最小二乗 min ||[Eᵀ; fᵀ]u - e_last|| (u ≥ 0) で解き、
    z = Eᵀu / (1 - fᵀu)、乗数 μ = u / (1 - fᵀu) を得る。
    直前の分位点の解のように全行で制約が等号となる初期点でも有限回で終わる。

    Args:
        gram: 設計行列 A とグラム行列の分解
        y: 目的変数
        lower: 各行の下限
        start: 実行可能であるべき係数（指定時は実行可能性を確認）
        tol: 実行可能性の許容誤差（絶対値）
        max_iter: 非負最小二乗の最大反復回数
        q: ログ・エラー用の分位点

    Returns:
        ConstrainedFit: 解と乗数

    Raises:
        SolverError: 初期点・問題が実行不能、または収束しない場合
    """
    A = gram.A
    y = np.asarray(y, dtype=float)
    lower = np.asarray(lower, dtype=float)

    if start is not None:
        slack = A @ np.asarray(start, dtype=float) - lower
        if slack.size and slack.min() < -tol:
            raise SolverError(f"初期点が実行可能ではありません (最大違反 {-slack.min():.3e})", q=q, iterations=0)

    theta_free = gram.solve(A.T @ y)
    f = lower - A @ theta_free
    M = np.vstack([gram.E_T, f[None, :]])
    target = np.zeros(M.shape[0])
    target[-1] = 1.0

    try:
        u, _ = optimize.nnls(M, target, maxiter=max_iter)
    except RuntimeError as e:
        raise SolverError(f"非負最小二乗が収束しませんでした: {e}", q=q, iterations=max_iter) from e

    residual = M @ u - target
    denominator = -residual[-1]
    if denominator <= 1e-14:
        raise SolverError("制約が実行不能です", q=q)

    z = residual[:-1] / denominator
    theta = theta_free + linalg.solve_triangular(gram.R, z)
    multipliers = u / denominator

    violation = (lower - A @ theta).max() if lower.size else 0.0
    if 0.0 < violation <= 1e3 * tol and gram.has_intercept:
        # 丸め誤差による違反は切片で持ち上げる
        theta[0] += violation
        violation = (lower - A @ theta).max()
    if violation > tol:
        raise SolverError(f"解が制約を満たしません (最大違反 {violation:.3e})", q=q)

    fitted = y - A @ theta
    return ConstrainedFit(
        theta=theta,
        multipliers=multipliers,
        active=[int(i) for i in np.flatnonzero(u > 0)],
        objective=float(fitted @ fitted),
    )


def kkt_residuals(
    A: np.ndarray,
    y: np.ndarray,
    lower: np.ndarray,
    theta: np.ndarray,
    multipliers: np.ndarray,
    ridge: float = 1e-8
) -> KKTResiduals:
    """
    解の KKT 残差を計算

    Args:
        A: 設計行列
        y: 目的変数
        lower: 下限
        theta: 係数
        multipliers: 各行のラグランジュ乗数（非有効行は 0）
        ridge: λ

    Returns:
        KKTResiduals: 各残差
    """
    A = np.asarray(A, dtype=float)
    c = A.T @ y
    scale = 1.0 + np.abs(c).max()
    gradient = A.T @ (A @ theta) + ridge * theta - c
    slack = A @ theta - lower
    return KKTResiduals(
        stationarity=float(np.abs(gradient - A.T @ multipliers).max() / scale),
        primal=float(max(0.0, (-slack).max())),
        dual=float(max(0.0, (-multipliers).max())),
        complementarity=float(np.abs(multipliers * slack).max() / scale),
    )


# ---------------------------------------------------------------------------
# 分位点モデル集合
# ---------------------------------------------------------------------------

def correct_crossing(predictions: np.ndarray) -> np.ndarray:
    """
    分位点予測の交差を補正

    最小分位点は max(ŷ, 0)、以降は補正済みの直前値との最大値（累積最大）。

    Args:
        predictions: 分位点順の予測 (Q) または (n×Q)

    Returns:
        np.ndarray: 単調非減少に補正した予測
    """
    corrected = np.array(predictions, dtype=float, copy=True)
    corrected[..., 0] = np.maximum(corrected[..., 0], 0.0)
    return np.maximum.accumulate(corrected, axis=-1)


@dataclass
class QuantileModelSet:
    """
    1世帯・1手法・1近傍数の分位点回帰の集合

    Attributes:
        thetas: (Q×width) 分位点ごとの係数
        grid: 分位点 (Q)
        poly: 多項式指定
        feature_spec: 特徴量指定（選択済み）
        descriptors: 特徴量の記述子
        household_id: 世帯ID
        technique: 手法名 (Poly1 など)
        k: 近傍数
        night_threshold: 夜間しきい値
        diagnostics: 分位点ごとの反復回数・KKT残差・目的関数値
    """
    thetas: np.ndarray
    grid: np.ndarray
    poly: PolynomialSpec
    feature_spec: FeatureSpec
    descriptors: List[FeatureDescriptor]
    household_id: str = ""
    technique: str = ""
    k: int = 0
    night_threshold: float = 1e-4
    diagnostics: List[Dict] = field(default_factory=list)

    @property
    def Q(self) -> int:
        return len(self.grid)

    def predict_batch(self, X: np.ndarray, night: Optional[np.ndarray] = None) -> np.ndarray:
        """
        複数入力の分位点予測（交差補正済み、夜間は全て 0）

        Args:
            X: 入力行列 (n×S)
            night: 夜間フラグ (n)

        Returns:
            np.ndarray: (n×Q)
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.poly.n_features:
            raise RegressionError(f"入力の次元が一致しません: {X.shape[1]} != {self.poly.n_features}")
        predictions = correct_crossing(expand(X, self.poly) @ self.thetas.T)
        if night is not None:
            predictions[np.asarray(night, dtype=bool)] = 0.0
        return predictions


def predict(model_set: QuantileModelSet, x: np.ndarray, night: bool = False) -> np.ndarray:
    """
    1入力の分位点予測

    Args:
        model_set: 分位点モデル集合
        x: 入力ベクトル (S)
        night: 夜間と判定された目的時刻なら True（全て 0 を返す）

    Returns:
        np.ndarray: Q 個の単調非減少な予測値

    Raises:
        RegressionError: 次元が一致しない場合
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != model_set.poly.n_features:
        raise RegressionError(f"入力の次元が一致しません: {x.shape} != ({model_set.poly.n_features},)")
    if night:
        return np.zeros(model_set.Q)
    return model_set.predict_batch(x[None, :])[0]


def fit_sequential(
    A: np.ndarray,
    targets: TransformedTargets,
    poly: PolynomialSpec,
    feature_spec: Optional[FeatureSpec] = None,
    descriptors: Optional[List[FeatureDescriptor]] = None,
    household_id: str = "",
    technique: str = "",
    ridge: float = 1e-8,
    tol: float = 1e-9,
    max_iter: int = 500,
    night_threshold: float = 1e-4
) -> QuantileModelSet:
    """
    最小分位点から順に制約付き最小二乗で当てはめる

    q=0.01 は Aθ ≥ 0、以降は Aθ_q ≥ Aθ_{q-0.01}（直前の解が実行可能であることを確認する）。

    Args:
        A: 設計行列 (N×width)
        targets: 変換後の目的変数
        poly: 多項式指定
        feature_spec: 特徴量指定
        descriptors: 特徴量の記述子
        household_id: 世帯ID
        technique: 手法名
        ridge: グラム行列の正則化 λ
        tol: 実行可能性の許容誤差
        max_iter: 1分位点あたりの非負最小二乗の最大反復回数
        night_threshold: 夜間しきい値（予測時に使用）

    Returns:
        QuantileModelSet: 分位点モデル集合

    Raises:
        SolverError: いずれかの分位点で収束しない場合
    """
    A = np.asarray(A, dtype=float)
    if A.shape[1] != poly.width:
        raise RegressionError(f"設計行列の列数 {A.shape[1]} が多項式の幅 {poly.width} と一致しません")
    if targets.values.shape[1] != A.shape[0]:
        raise RegressionError(f"目的変数の長さ {targets.values.shape[1]} が設計行列の行数 {A.shape[0]} と一致しません")

    gram = GramFactor(A, ridge)
    thetas = np.empty((len(targets.grid), poly.width))
    diagnostics = []

    theta = np.zeros(poly.width)
    lower = np.zeros(A.shape[0])

    for j, q in enumerate(targets.grid):
        y_q = targets.values[j]
        fit = solve_constrained(gram, y_q, lower, theta, tol=tol, max_iter=max_iter, q=float(q))
        residuals = kkt_residuals(A, y_q, lower, fit.theta, fit.multipliers, ridge)
        diagnostics.append({
            "q": float(q),
            "active": len(fit.active),
            "objective": fit.objective,
            "kkt": residuals.max(),
        })
        thetas[j] = fit.theta
        theta = fit.theta
        lower = A @ theta

    logger.debug(
        f"{household_id} {technique} k={targets.k}: "
        f"{len(targets.grid)} 分位点, 有効制約の最大数 {max(d['active'] for d in diagnostics)}"
    )

    return QuantileModelSet(
        thetas=thetas,
        grid=np.asarray(targets.grid, dtype=float),
        poly=poly,
        feature_spec=feature_spec or FeatureSpec(),
        descriptors=list(descriptors or []),
        household_id=household_id,
        technique=technique,
        k=targets.k,
        night_threshold=night_threshold,
        diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# 前方特徴量選択
# ---------------------------------------------------------------------------

Scorer = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], float]


@dataclass
class SelectionResult:
    """
    前方特徴量選択の結果

    Attributes:
        indices: 選択順の候補インデックス
        step_scores: 各ステップで採用した候補のスコア
        trace: それまでの最良スコア（非増加）
    """
    indices: List[int]
    step_scores: List[float]
    trace: List[float]


def mse_scorer(degree: int, ridge: float = 1e-8) -> Scorer:
    """
    平均回帰のホールドアウト平均二乗誤差を返すスコア関数を作る

    Args:
        degree: 多項式次数
        ridge: λ

    Returns:
        Scorer: (X_train, y_train, X_valid, y_valid) -> MSE
    """
    def score(X_train: np.ndarray, y_train: np.ndarray, X_valid: np.ndarray, y_valid: np.ndarray) -> float:
        poly = PolynomialSpec(degree=degree, n_features=X_train.shape[1])
        theta = fit_mean(expand(X_train, poly), y_train, ridge)
        residual = y_valid - expand(X_valid, poly) @ theta
        return float(np.mean(residual ** 2))

    return score


def holdout_split(n: int, fraction: float = 0.2, method: str = "chronological", seed: int = 0):
    """
    選択用のホールドアウト分割

    Args:
        n: 行数
        fraction: 検証に回す割合
        method: "chronological"（末尾を検証）または "random"
        seed: random のときのシード

    Returns:
        Tuple[np.ndarray, np.ndarray]: (学習行, 検証行)
    """
    n_valid = max(1, int(round(n * fraction)))
    if n - n_valid < 1:
        raise RegressionError(f"ホールドアウト分割に必要な行数が足りません (n={n})")
    if method == "random":
        order = np.random.default_rng(seed).permutation(n)
        return np.sort(order[:n - n_valid]), np.sort(order[n - n_valid:])
    if method != "chronological":
        raise RegressionError(f"未知のホールドアウト方法: {method}")
    return np.arange(n - n_valid), np.arange(n - n_valid, n)


def forward_select(
    learning_set: LearningSet,
    pool: CandidatePool,
    S: int,
    scorer: Scorer,
    holdout_fraction: float = 0.2,
    holdout: str = "chronological",
    seed: int = 0
) -> SelectionResult:
    """
    前方特徴量選択

    空集合から始め、スコアが最小になる候補を1つずつ追加する（同点は候補番号の小さい方）。

    Args:
        learning_set: 選択に使う学習ペア（origins と y を使う）
        pool: 候補集合
        S: 選択数
        scorer: スコア関数（小さいほど良い）
        holdout_fraction: 検証に回す割合
        holdout: "chronological" または "random"
        seed: random のときのシード

    Returns:
        SelectionResult: 選択結果

    Raises:
        RegressionError: 候補が空、S が候補数を超える、または全候補が失敗した場合
    """
    if len(pool) == 0:
        raise RegressionError("候補集合が空です")
    if S < 1 or S > len(pool):
        raise RegressionError(f"選択数 S={S} が候補数 {len(pool)} を超えています")

    order = np.argsort(learning_set.origins, kind="stable")
    origins = learning_set.origins[order]
    y = learning_set.y[order]
    train, valid = holdout_split(len(y), holdout_fraction, holdout, seed)

    chosen: List[int] = []
    chosen_columns = np.empty((len(y), 0))
    step_scores: List[float] = []
    trace: List[float] = []

    for step in range(S):
        best_index, best_score = None, np.inf
        for candidate in range(len(pool)):
            if candidate in chosen:
                continue
            column = pool.columns([candidate], origins)
            X = np.hstack([chosen_columns, column])
            try:
                score = scorer(X[train], y[train], X[valid], y[valid])
            except (ValueError, ArithmeticError, linalg.LinAlgError, SolverError) as e:
                logger.warning(f"{learning_set.household_id}: 候補 {pool.descriptors[candidate].name} のスコア計算に失敗しました: {e}")
                continue
            if not np.isfinite(score):
                logger.warning(f"{learning_set.household_id}: 候補 {pool.descriptors[candidate].name} のスコアが有限ではありません")
                continue
            if score < best_score:
                best_index, best_score = candidate, score

        if best_index is None:
            raise RegressionError(f"{learning_set.household_id}: ステップ {step + 1} で全ての候補が失敗しました")

        chosen.append(best_index)
        chosen_columns = np.hstack([chosen_columns, pool.columns([best_index], origins)])
        step_scores.append(float(best_score))
        trace.append(float(min(best_score, trace[-1])) if trace else float(best_score))
        logger.info(
            f"{learning_set.household_id}: 選択 {step + 1}/{S} {pool.descriptors[best_index].name} "
            f"(MSE={best_score:.6g})"
        )

    return SelectionResult(indices=chosen, step_scores=step_scores, trace=trace)


# ---------------------------------------------------------------------------
# 手法の登録
# ---------------------------------------------------------------------------

class PolynomialTechnique:
    """多項式回帰 (Poly1/Poly2/Poly3)"""

    def __init__(self, degree: int):
        self.degree = degree
        self.name = f"Poly{degree}"

    def spec(self, n_features: int) -> PolynomialSpec:
        return PolynomialSpec(degree=self.degree, n_features=n_features)

    def scorer(self, ridge: float = 1e-8) -> Scorer:
        return mse_scorer(self.degree, ridge)

    def fit_quantiles(
        self,
        learning_set: LearningSet,
        targets: TransformedTargets,
        feature_spec: FeatureSpec,
        ridge: float = 1e-8,
        tol: float = 1e-9,
        max_iter: int = 500,
        night_threshold: float = 1e-4
    ) -> QuantileModelSet:
        """学習ペアと変換後の目的変数から分位点モデル集合を作る"""
        poly = self.spec(learning_set.S)
        return fit_sequential(
            expand(learning_set.X, poly),
            targets,
            poly,
            feature_spec=feature_spec,
            descriptors=learning_set.descriptors,
            household_id=learning_set.household_id,
            technique=self.name,
            ridge=ridge,
            tol=tol,
            max_iter=max_iter,
            night_threshold=night_threshold,
        )


TECHNIQUES: Dict[str, PolynomialTechnique] = {
    f"Poly{degree}": PolynomialTechnique(degree) for degree in (1, 2, 3)
}


def get_technique(name: str) -> PolynomialTechnique:
    """
    手法名から手法を取得

    Args:
        name: 手法名 (Poly1, Poly2, Poly3)

    Returns:
        PolynomialTechnique: 手法

    Raises:
        RegressionError: 未登録の手法名
    """
    technique = TECHNIQUES.get(name)
    if technique is None:
        raise RegressionError(f"未対応の手法: {name}。有効な値: {', '.join(TECHNIQUES)}")
    return technique


# ---------------------------------------------------------------------------
# 永続化
# ---------------------------------------------------------------------------

class ModelDocument(BaseModel):
    """分位点モデル集合のJSON文書"""
    schema_version: int = SCHEMA_VERSION
    household_id: str
    technique: str
    k_nn: int
    degree: int
    n_features: int
    features: List[Dict]
    feature_spec: Dict
    night_threshold: float
    quantiles: List[float]
    coefficients: List[List[float]]
    diagnostics: List[Dict] = Field(default_factory=list)


def to_document(model_set: QuantileModelSet) -> ModelDocument:
    spec = model_set.feature_spec
    return ModelDocument(
        household_id=model_set.household_id,
        technique=model_set.technique,
        k_nn=model_set.k,
        degree=model_set.poly.degree,
        n_features=model_set.poly.n_features,
        features=[d.to_dict() for d in model_set.descriptors],
        feature_spec={
            "horizon": spec.horizon,
            "max_lag": spec.max_lag,
            "period": spec.period,
            "window_days": spec.window_days,
            "n_features": spec.n_features,
            "selected": list(spec.selected),
        },
        night_threshold=model_set.night_threshold,
        quantiles=[float(q) for q in model_set.grid],
        coefficients=[[float(v) for v in row] for row in model_set.thetas],
        diagnostics=model_set.diagnostics,
    )


def from_document(document: ModelDocument) -> QuantileModelSet:
    raw = document.feature_spec
    feature_spec = FeatureSpec(
        horizon=int(raw["horizon"]),
        max_lag=int(raw["max_lag"]),
        period=int(raw["period"]),
        window_days=int(raw["window_days"]),
        n_features=int(raw["n_features"]),
        selected=tuple(int(i) for i in raw["selected"]),
    )
    return QuantileModelSet(
        thetas=np.asarray(document.coefficients, dtype=float),
        grid=np.asarray(document.quantiles, dtype=float),
        poly=PolynomialSpec(degree=document.degree, n_features=document.n_features),
        feature_spec=feature_spec,
        descriptors=[FeatureDescriptor.from_dict(d) for d in document.features],
        household_id=document.household_id,
        technique=document.technique,
        k=document.k_nn,
        night_threshold=document.night_threshold,
        diagnostics=list(document.diagnostics),
    )


def save_model_set(model_set: QuantileModelSet, path: Path) -> Path:
    """
    分位点モデル集合をJSONに保存（float は往復で一致する最短表現）

    Args:
        model_set: 分位点モデル集合
        path: 保存先

    Returns:
        Path: 書き出したファイル
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(to_document(model_set).model_dump(mode="python"), f, ensure_ascii=False, indent=2)
        f.write("\n")
    return path


def load_model_set(path: Path) -> QuantileModelSet:
    """
    JSONから分位点モデル集合を読み込む

    Args:
        path: ファイルパス

    Returns:
        QuantileModelSet: 分位点モデル集合
    """
    with open(path, 'r', encoding='utf-8') as f:
        data = json.load(f)
    return from_document(ModelDocument.model_validate(data))
