"""
近傍に基づく目的変数変換モジュール

学習入力間の重み付きユークリッド距離で k 近傍を求め、
各学習ペアの目的変数を近傍出力の経験分位点で置き換えます。
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from .config import Config, NeighborBackend
from .features import LearningSet

logger = logging.getLogger(__name__)


class NeighborError(ValueError):
    """近傍計算・分位点計算のエラー"""


@dataclass(frozen=True)
class DistanceWeights:
    """特徴量ごとの距離重み w_s = 1 / max(var, ε)"""
    weights: np.ndarray
    epsilon: float = 1e-12


@dataclass(frozen=True)
class NeighborTable:
    """
    各行の k 近傍（距離の昇順、同距離は行番号の昇順）

    Attributes:
        indices: (N×k) 近傍の行番号
        distances: (N×k) 距離
        k: 近傍数
        include_self: 自分自身を近傍に含めたか
    """
    indices: np.ndarray
    distances: np.ndarray
    k: int
    include_self: bool = True

    @property
    def N(self) -> int:
        return self.indices.shape[0]


@dataclass(frozen=True)
class TransformedTargets:
    """
    分位点ごとに置き換えた目的変数

    Attributes:
        grid: 分位点 (Q)
        values: (Q×N) values[j, i] = y_{q_j, i}
        k: 使用した近傍数
    """
    grid: np.ndarray
    values: np.ndarray
    k: int

    def level(self, q: float) -> np.ndarray:
        """分位点 q の目的変数ベクトル"""
        position = int(np.argmin(np.abs(self.grid - q)))
        if abs(self.grid[position] - q) > 1e-9:
            raise NeighborError(f"分位点 {q} はグリッドにありません")
        return self.values[position]


def compute_weights(X: np.ndarray, epsilon: float = 1e-12) -> DistanceWeights:
    """
    学習入力の分散の逆数から距離重みを計算（母分散、定数列は ε で正則化）

    Args:
        X: 入力行列 (N×S)
        epsilon: 分散の下限

    Returns:
        DistanceWeights: 重み

    Raises:
        NeighborError: N < 2 の場合
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise NeighborError(f"重みの計算には2行以上必要です (shape={X.shape})")
    variance = X.var(axis=0, ddof=0)
    return DistanceWeights(weights=1.0 / np.maximum(variance, epsilon), epsilon=epsilon)


def _scaled(X: np.ndarray, weights: DistanceWeights) -> np.ndarray:
    return np.asarray(X, dtype=float) * np.sqrt(weights.weights)


def _distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """スケール済みの行同士の距離（特徴量の順に足す。同じ組なら探索方法によらず同じ値）"""
    squared = np.zeros(np.broadcast_shapes(A.shape, B.shape)[:-1])
    for s in range(A.shape[-1]):
        squared += (A[..., s] - B[..., s]) ** 2
    return np.sqrt(squared)


def _row_distances(Xs: np.ndarray, row: int, candidates: np.ndarray) -> np.ndarray:
    return _distances(Xs[candidates], Xs[row])


def _brute_neighbors(Xs: np.ndarray, k: int, include_self: bool, block_size: int):
    N = Xs.shape[0]
    indices = np.empty((N, k), dtype=np.int64)
    distances = np.empty((N, k))

    for start in range(0, N, block_size):
        stop = min(start + block_size, N)
        block = Xs[start:stop]

        dist = _distances(block[:, None, :], Xs[None, :, :])
        if not include_self:
            dist[np.arange(stop - start), np.arange(start, stop)] = np.inf

        kth = np.partition(dist, k - 1, axis=1)[:, k - 1]
        for offset, row in enumerate(range(start, stop)):
            candidates = np.flatnonzero(dist[offset] <= kth[offset])
            # 候補は行番号の昇順なので安定ソートで同距離は行番号順になる
            order = np.argsort(dist[offset, candidates], kind="stable")[:k]
            chosen = candidates[order]
            indices[row] = chosen
            distances[row] = dist[offset, chosen]

    return indices, distances


def _kdtree_neighbors(Xs: np.ndarray, k: int, include_self: bool):
    N = Xs.shape[0]
    tree = cKDTree(Xs)
    extra = 1 if include_self else 2
    query_k = min(k + extra, N)
    _, found = tree.query(Xs, k=query_k)
    found = np.asarray(found, dtype=np.int64).reshape(N, query_k)

    # 距離は総当たりと同じ式で計算し直す
    exact = _distances(Xs[found], Xs[:, None, :])
    if not include_self:
        exact[found == np.arange(N)[:, None]] = np.inf

    order = np.lexsort((found, exact), axis=-1)
    found = np.take_along_axis(found, order, axis=1)
    exact = np.take_along_axis(exact, order, axis=1)

    indices = found[:, :k].copy()
    distances = exact[:, :k].copy()

    if query_k > k:
        boundary_ties = np.flatnonzero(exact[:, k - 1] == exact[:, k])
        for row in boundary_ties:
            radius = exact[row, k - 1]
            candidates = np.asarray(
                sorted(tree.query_ball_point(Xs[row], r=radius * (1 + 1e-9) + 1e-300)), dtype=np.int64
            )
            if not include_self:
                candidates = candidates[candidates != row]
            d = _row_distances(Xs, row, candidates)
            keep = d <= radius
            candidates, d = candidates[keep], d[keep]
            order = np.argsort(d, kind="stable")[:k]
            indices[row] = candidates[order]
            distances[row] = d[order]
        if boundary_ties.size:
            logger.debug(f"境界で同距離となった {boundary_ties.size} 行を半径探索で確定しました")

    return indices, distances


def pairwise_neighbors(
    X: np.ndarray,
    weights: DistanceWeights,
    k: int,
    include_self: bool = True,
    backend: NeighborBackend = NeighborBackend.AUTO,
    block_size: int = 0
) -> NeighborTable:
    """
    重み付きユークリッド距離 d_ij = (Σ w_s (x_is - x_js)^2)^(1/2) で k 近傍を求める

    自分自身（d_ii = 0）も近傍に含む（include_self=False で除外）。
    同距離は行番号の小さい方を優先する。

    Args:
        X: 入力行列 (N×S)
        weights: 距離重み
        k: 近傍数
        include_self: 自分自身を含めるか
        backend: "brute"（総当たり）/ "kdtree" / "auto"
        block_size: 総当たりで一度に処理する行数（0なら自動）

    Returns:
        NeighborTable: 近傍表

    Raises:
        NeighborError: k が使える行数を超える場合
    """
    X = np.asarray(X, dtype=float)
    N = X.shape[0]
    available = N if include_self else N - 1
    if k < 1 or k > available:
        raise NeighborError(f"k_NN={k} が学習ペア数を超えています (N={N}, include_self={include_self})")

    backend = NeighborBackend(backend)
    if backend == NeighborBackend.AUTO:
        backend = NeighborBackend.KDTREE if X.shape[1] <= 8 else NeighborBackend.BRUTE

    Xs = _scaled(X, weights)
    if backend == NeighborBackend.KDTREE:
        indices, distances = _kdtree_neighbors(Xs, k, include_self)
    else:
        if block_size <= 0:
            block_size = max(1, (1 << 22) // max(N, 1))
        indices, distances = _brute_neighbors(Xs, k, include_self, block_size)

    logger.debug(f"近傍表を作成しました (N={N}, k={k}, backend={backend.value})")
    return NeighborTable(indices=indices, distances=distances, k=k, include_self=include_self)


def empirical_quantile(sorted_outputs: np.ndarray, q) -> np.ndarray:
    """
    昇順の近傍出力から経験分位点を求める

    j 番目の値にプロット位置 (j-0.5)/k を割り当て、位置の間は線形補間、
    最初の位置より下と最後の位置より上は端の値に固定する。

    Args:
        sorted_outputs: 昇順の出力 (k)
        q: 分位点（スカラーまたは配列）

    Returns:
        分位点の値

    Raises:
        NeighborError: 出力が空の場合
    """
    sorted_outputs = np.asarray(sorted_outputs, dtype=float)
    if sorted_outputs.size == 0:
        raise NeighborError("空の出力集合から分位点は求められません")
    return np.quantile(sorted_outputs, q, method="hazen")


def transform_targets(
    learning_set: LearningSet,
    table: NeighborTable,
    grid: Sequence[float]
) -> TransformedTargets:
    """
    各行の目的変数を近傍出力の q 分位点で置き換える（元の y は変更しない）

    Args:
        learning_set: 学習ペア
        table: 同じ学習ペアで作成した近傍表
        grid: 分位点グリッド

    Returns:
        TransformedTargets: (Q×N) の置き換え後の目的変数
    """
    if table.N != learning_set.N:
        raise NeighborError(f"近傍表の行数 {table.N} が学習ペア数 {learning_set.N} と一致しません")

    grid = np.asarray(grid, dtype=float)
    outputs = np.sort(learning_set.y[table.indices], axis=1)
    values = np.quantile(outputs, grid, axis=1, method="hazen")
    # 補間の丸めで隣接分位点が1ulp逆転しうる
    values = np.maximum.accumulate(values, axis=0)

    return TransformedTargets(grid=grid, values=values, k=table.k)


def export_transformed_targets(targets: TransformedTargets, path: Path) -> Path:
    """
    変換後の目的変数を (row, q, value) 形式のCSVに書き出す

    Args:
        targets: 変換後の目的変数
        path: 保存先

    Returns:
        Path: 書き出したファイル
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Q, N = targets.values.shape
    table = pd.DataFrame({
        "row": np.tile(np.arange(N), Q),
        "q": np.repeat(np.round(targets.grid, 10), N),
        "value": targets.values.reshape(-1),
    })
    table.to_csv(path, index=False, float_format=Config.float_format())
    return path


def save_targets(targets: TransformedTargets, path: Path) -> Path:
    """変換後の目的変数を .npy で保存（キャッシュ用、値はビット単位で保存）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        np.save(f, targets.values, allow_pickle=False)
    return path


def load_targets(path: Path, grid: Sequence[float], k: int) -> TransformedTargets:
    """
    save_targets で保存した目的変数を読み込む

    Args:
        path: .npy のパス
        grid: 保存時の分位点グリッド
        k: 近傍数

    Returns:
        TransformedTargets: 変換後の目的変数

    Raises:
        NeighborError: グリッドと行数が一致しない場合
    """
    grid = np.asarray(grid, dtype=float)
    with open(path, 'rb') as f:
        values = np.load(f, allow_pickle=False)
    if values.ndim != 2 or values.shape[0] != len(grid):
        raise NeighborError(f"{path}: 形状 {values.shape} がグリッド ({len(grid)}) と一致しません")
    return TransformedTargets(grid=grid, values=values, k=k)
