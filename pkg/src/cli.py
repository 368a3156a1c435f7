"""
コマンドラインインターフェース

設定ファイル1つから 取り込み → 学習 → 予測 → 評価 → レポート を実行します。
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .artifact_cache import ArtifactCache
from .config import Config, ConfigError, RunConfig, load_run_config
from .pipeline import SUBCOMMAND_STAGES, ForecastPipeline, StageError, latest_run
from .report import ReportError, report

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_STAGE_ERROR = 1
EXIT_CONFIG_ERROR = 2


def _str_list(value: str) -> List[str]:
    items = [item.strip() for item in value.split(",") if item.strip()]
    if not items:
        raise argparse.ArgumentTypeError("empty list")
    return items


def _int_list(value: str) -> List[int]:
    try:
        return [int(item) for item in _str_list(value)]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"integers expected: {value}") from e


def setup_logging(level: str):
    """ログをファイルと標準エラーに出力"""
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=Config.LOG_FORMAT,
        handlers=[
            logging.FileHandler(Config.LOG_FILE, encoding='utf-8'),
            logging.StreamHandler()
        ]
    )


def build_parser() -> argparse.ArgumentParser:
    """引数パーサーを作成"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Run configuration YAML (default: built-in defaults)", default=None)
    common.add_argument("--households", help="Comma-separated household IDs", type=_str_list, default=None)
    common.add_argument("--knn", help="Comma-separated k_NN values, e.g. 50,70,100,120", type=_int_list, default=None)
    common.add_argument("--degrees", help="Comma-separated polynomial degrees, e.g. 1,2,3", type=_int_list, default=None)
    common.add_argument("--out", help="Output directory (default: from config / OUTPUT_DIR)", default=None)
    common.add_argument("--workers", help="Number of parallel household workers", type=int, default=None)
    common.add_argument("--seed", help="Random seed for the selection holdout", type=int, default=None)
    common.add_argument(
        "--log-level",
        help=f"Log level (default: {Config.LOG_LEVEL})",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        default=Config.LOG_LEVEL.upper()
    )

    parser = argparse.ArgumentParser(
        description="kNN quantile-transform PV power forecaster"
    )
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("ingest", parents=[common], help="Ingest and normalize the data")
    commands.add_parser("train", parents=[common], help="Select features, transform targets and fit quantile models")
    commands.add_parser("predict", parents=[common], help="Predict the test half")
    commands.add_parser("evaluate", parents=[common], help="Evaluate quantile and interval forecasts")
    report_parser = commands.add_parser("report", parents=[common], help="Write summary tables and plot data")
    report_parser.add_argument("--run-dir", help="Run directory (default: latest run under the output directory)", default=None)
    commands.add_parser("run", parents=[common], help="Run all stages and write the report")
    cache_parser = commands.add_parser("cache", parents=[common], help="Show or clean the artifact cache")
    cache_parser.add_argument("--stage", help="Only list entries of this stage", default=None)
    cache_parser.add_argument("--clear-days", help="Delete entries older than N days", type=int, default=None)
    cache_parser.add_argument("--rebuild-index", help="Rebuild cache_index.json from meta.json files", action="store_true")
    return parser


def run_cache_command(config: RunConfig, stage: Optional[str], clear_days: Optional[int], rebuild_index: bool) -> int:
    """
    キャッシュの統計表示と削除

    Args:
        config: 実行設定（キャッシュの場所を決める）
        stage: 一覧を表示する段階（Noneなら全段階）
        clear_days: 指定した日数より古いエントリを削除
        rebuild_index: インデックスを作り直す

    Returns:
        int: 終了コード
    """
    cache = ArtifactCache(str(Config.resolve_cache_dir(config.run.output_dir)))
    if rebuild_index:
        cache.refresh_index()
    if clear_days is not None:
        deleted = cache.clear_old_cache(days=clear_days)
        print(f"Deleted {deleted} cache entries older than {clear_days} days")

    stats = cache.get_cache_stats()
    print("=" * 60)
    print(f"Cache directory: {stats['cache_dir']}")
    print(f"Entries: {stats['total_entries']}")
    for name, count in sorted(stats["stages"].items()):
        print(f"  {name:<9} {count}")
    if stage:
        for name in cache.get_cached_entries(stage):
            print(f"  {name}")
    print("=" * 60)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """
    メイン処理

    Args:
        argv: 引数（Noneなら sys.argv）

    Returns:
        int: 終了コード（0: 成功, 1: 段階の失敗, 2: 設定エラー）
    """
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)

    try:
        config = load_run_config(args.config).with_overrides(
            households=args.households,
            knn=args.knn,
            degrees=args.degrees,
            out=args.out,
            workers=args.workers,
            seed=args.seed,
        )
    except ConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    if args.command == "cache":
        return run_cache_command(config, args.stage, args.clear_days, args.rebuild_index)

    try:
        if args.command == "report":
            run_dir = Path(args.run_dir) if args.run_dir else latest_run(config.run.output_dir)
            if run_dir is None:
                raise ReportError([f"{config.run.output_dir}/run-*"])
            written = report(run_dir)
            print(f"Report: {len(written)} files under {run_dir / 'report'}")
            return EXIT_OK

        pipeline = ForecastPipeline(config)
        result = pipeline.execute(until=SUBCOMMAND_STAGES[args.command])

        print("=" * 60)
        print(f"Run directory: {result.run_dir}")
        for stage, ratio in result.summary().items():
            print(f"  {stage:<9} cache hits {ratio}")
        print("=" * 60)

        if args.command == "run":
            written = report(result.run_dir)
            print(f"Report: {len(written)} files under {result.run_dir / 'report'}")
        return EXIT_OK

    except StageError as e:
        print(f"Error: stage '{e.stage}' failed (household={e.household}): {e.cause}", file=sys.stderr)
        return EXIT_STAGE_ERROR
    except ReportError as e:
        print(f"Error: stage 'report' failed: {e}", file=sys.stderr)
        return EXIT_STAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
