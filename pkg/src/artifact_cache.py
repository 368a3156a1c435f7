"""
成果物キャッシュ管理モジュール

段階ごとの成果物（学習ペア、変換後の目的変数、モデル、評価結果）を
内容ハッシュをキーとしてディレクトリに保存します。
"""

import hashlib
import json
import logging
import shutil
from datetime import datetime, timedelta
from pathlib import Path
from typing import Any, Dict, List, Optional

logger = logging.getLogger(__name__)


def canonical_json(payload: Any) -> str:
    """キー順を固定したJSON文字列"""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False, default=str)


def cache_key(stage: str, payload: Any) -> str:
    """
    段階名と入力（設定の一部・上流ハッシュ）からキャッシュキーを作る

    Args:
        stage: 段階名
        payload: JSON化できる入力

    Returns:
        str: SHA-256 の16進文字列
    """
    return hashlib.sha256(canonical_json({"stage": stage, "payload": payload}).encode("utf-8")).hexdigest()


def file_hash(path: Path) -> str:
    """ファイル内容の SHA-256"""
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class ArtifactCache:
    """成果物のキャッシュ管理クラス"""

    def __init__(self, cache_dir: str = "./runs/cache", enabled: bool = True):
        """
        初期化

        Args:
            cache_dir: キャッシュディレクトリのパス
            enabled: False なら常にキャッシュミス扱い（書き込みは行う）
        """
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.enabled = enabled

        # インデックスファイルのパス
        self.index_file = self.cache_dir / "cache_index.json"
        self.index = self._load_index()

    def _load_index(self) -> Dict:
        """
        キャッシュインデックスを読み込み

        Returns:
            Dict: インデックスデータ
        """
        if self.index_file.exists():
            try:
                with open(self.index_file, 'r', encoding='utf-8') as f:
                    return json.load(f)
            except Exception as e:
                logger.error(f"Failed to load cache index: {e}")
                return {}
        return {}

    def _save_index(self):
        """キャッシュインデックスを保存"""
        try:
            with open(self.index_file, 'w', encoding='utf-8') as f:
                json.dump(self.index, f, ensure_ascii=False, indent=2, sort_keys=True)
        except Exception as e:
            logger.error(f"Failed to save cache index: {e}")

    def entry_dir(self, stage: str, key: str) -> Path:
        """
        キャッシュエントリのディレクトリ

        Args:
            stage: 段階名
            key: キャッシュキー

        Returns:
            Path: <cache_dir>/<stage>/<key>
        """
        return self.cache_dir / stage / key

    def has(self, stage: str, key: str) -> bool:
        """
        有効なキャッシュが存在するか確認

        Args:
            stage: 段階名
            key: キャッシュキー

        Returns:
            bool: 存在し、全ファイルのハッシュが一致すれば True
        """
        if not self.enabled:
            return False
        meta = self.load_meta(stage, key)
        if meta is None:
            return False
        entry = self.entry_dir(stage, key)
        for name, digest in meta.get("files", {}).items():
            path = entry / name
            if not path.exists() or file_hash(path) != digest:
                logger.warning(f"Cache entry corrupted: {stage}/{key[:12]} ({name})")
                return False
        return True

    def load_meta(self, stage: str, key: str) -> Optional[Dict]:
        """
        エントリのメタデータを読み込み

        Returns:
            Optional[Dict]: メタデータ、存在しない場合は None
        """
        meta_path = self.entry_dir(stage, key) / "meta.json"
        if not meta_path.exists():
            return None
        try:
            with open(meta_path, 'r', encoding='utf-8') as f:
                return json.load(f)
        except Exception as e:
            logger.error(f"Failed to load cache meta {stage}/{key[:12]}: {e}")
            return None

    def commit(self, stage: str, key: str, info: Optional[Dict] = None) -> Dict:
        """
        エントリのディレクトリに書き込まれたファイルを確定する

        ファイルのハッシュを meta.json に記録する。並列ワーカーから呼んでも
        エントリ単位で独立しているため安全（インデックス更新は refresh_index で行う）。

        Args:
            stage: 段階名
            key: キャッシュキー
            info: 任意の付加情報

        Returns:
            Dict: メタデータ
        """
        entry = self.entry_dir(stage, key)
        files = {
            path.name: file_hash(path)
            for path in sorted(entry.iterdir())
            if path.is_file() and path.name != "meta.json"
        }
        meta = {
            "stage": stage,
            "key": key,
            "cached_at": datetime.now().isoformat(),
            "files": files,
            "info": info or {},
        }
        tmp_path = entry / "meta.json.tmp"
        with open(tmp_path, 'w', encoding='utf-8') as f:
            json.dump(meta, f, ensure_ascii=False, indent=2, sort_keys=True)
        tmp_path.replace(entry / "meta.json")
        logger.debug(f"Artifact cached: {stage}/{key[:12]} ({len(files)} files)")
        return meta

    def prepare(self, stage: str, key: str) -> Path:
        """
        書き込み用にエントリのディレクトリを空の状態で用意する

        Returns:
            Path: エントリのディレクトリ
        """
        entry = self.entry_dir(stage, key)
        if entry.exists():
            shutil.rmtree(entry)
        entry.mkdir(parents=True, exist_ok=True)
        return entry

    def refresh_index(self):
        """ディスク上の meta.json からインデックスを作り直す"""
        index = {}
        for meta_path in sorted(self.cache_dir.glob("*/*/meta.json")):
            try:
                with open(meta_path, 'r', encoding='utf-8') as f:
                    meta = json.load(f)
                index[f"{meta['stage']}/{meta['key']}"] = {
                    "cached_at": meta["cached_at"],
                    "path": str(meta_path.parent),
                    "file_count": len(meta.get("files", {})),
                }
            except Exception as e:
                logger.warning(f"Skipping unreadable cache meta {meta_path}: {e}")
        self.index = index
        self._save_index()

    def delete(self, stage: str, key: str) -> bool:
        """
        キャッシュを削除

        Returns:
            bool: 削除に成功すれば True
        """
        try:
            entry = self.entry_dir(stage, key)
            if entry.exists():
                shutil.rmtree(entry)
                self.index.pop(f"{stage}/{key}", None)
                self._save_index()
                logger.info(f"Cache deleted: {stage}/{key[:12]}")
                return True
            return False
        except Exception as e:
            logger.error(f"Failed to delete cache: {e}")
            return False

    def get_cached_entries(self, stage: Optional[str] = None) -> List[str]:
        """
        キャッシュされているエントリ一覧

        Args:
            stage: 段階名（Noneの場合は全段階）

        Returns:
            List[str]: "<stage>/<key>" のリスト
        """
        if stage:
            return [name for name in self.index if name.startswith(f"{stage}/")]
        return list(self.index)

    def get_cache_stats(self) -> Dict:
        """
        キャッシュの統計情報を取得

        Returns:
            Dict: 統計情報
        """
        stages: Dict[str, int] = {}
        for name in self.index:
            stage = name.split("/", 1)[0]
            stages[stage] = stages.get(stage, 0) + 1
        return {
            'total_entries': len(self.index),
            'stages': stages,
            'cache_dir': str(self.cache_dir),
            'index_file': str(self.index_file)
        }

    def clear_old_cache(self, days: int = 30) -> int:
        """
        古いキャッシュを削除

        Args:
            days: 保持する日数

        Returns:
            int: 削除したエントリ数
        """
        cutoff_date = datetime.now() - timedelta(days=days)
        deleted_count = 0

        for name, info in list(self.index.items()):
            try:
                cached_at = datetime.fromisoformat(info['cached_at'])
                if cached_at < cutoff_date:
                    stage, key = name.split("/", 1)
                    if self.delete(stage, key):
                        deleted_count += 1
            except Exception as e:
                logger.warning(f"Failed to check cache age for {name}: {e}")

        logger.info(f"Cleared {deleted_count} old cache entries")
        return deleted_count
