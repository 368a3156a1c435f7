"""
kNN分位点予測 起動スクリプト

例:
    python run.py run --config configs/default.yaml
    python run.py report --run-dir runs/run-20240101T000000000000Z
"""

import sys

if __name__ == "__main__":
    from src.cli import main

    sys.exit(main())
