"""
サンプルデータ作成ツール

開発・動作確認用に、合成した太陽光発電量のワイド形式CSVを作成します。
"""

import argparse
import logging
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.synthetic import default_sites, generate_frames, write_wide_csv

logger = logging.getLogger(__name__)


def make_sample(
    output: str = "./sample_data/pv_sample.csv",
    households: int = 2,
    days: int = 90,
    resolution_minutes: int = 15,
    start: str = "2010-07-01",
    seed: int = 0
) -> Path:
    """
    合成サンプルCSVを作成

    Args:
        output: 保存先
        households: 世帯数
        days: 日数
        resolution_minutes: Δt [分]
        start: 開始日
        seed: 乱数シード

    Returns:
        Path: 書き出したファイル
    """
    print("=" * 60)
    print("PV Sample Data Generator")
    print("=" * 60)
    print(f"Households: {households}")
    print(f"Days: {days} (Δt={resolution_minutes}min)")
    print(f"Output: {output}")
    print("=" * 60)

    frames = generate_frames(default_sites(households), days, resolution_minutes, start, seed)
    return write_wide_csv(frames, Path(output))


def main():
    """メイン処理"""
    parser = argparse.ArgumentParser(
        description="Generate a synthetic PV power sample CSV"
    )
    parser.add_argument("--output", help="Output CSV (default: ./sample_data/pv_sample.csv)", default="./sample_data/pv_sample.csv")
    parser.add_argument("--households", help="Number of households (default: 2)", type=int, default=2)
    parser.add_argument("--days", help="Number of days (default: 90)", type=int, default=90)
    parser.add_argument("--resolution", help="Sampling interval in minutes (default: 15)", type=int, default=15)
    parser.add_argument("--start", help="First day (default: 2010-07-01)", default="2010-07-01")
    parser.add_argument("--seed", help="Random seed (default: 0)", type=int, default=0)
    parser.add_argument(
        "--log-level",
        help="Log level (default: INFO)",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        default="INFO"
    )
    args = parser.parse_args()

    # ロギング設定
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    if args.households < 1 or args.days < 1 or (24 * 60) % args.resolution != 0:
        print("Error: households and days must be positive and the resolution must divide a day.")
        return 1

    path = make_sample(args.output, args.households, args.days, args.resolution, args.start, args.seed)
    print()
    print(f"[OK] Wrote {path}")
    print("Run the forecaster with:")
    print("  python run.py run --config configs/default.yaml")
    return 0


if __name__ == "__main__":
    sys.exit(main())
