"""Latency and failure rate against task failure probability, written as CSV and PNG.

Usage: python scripts/reliability_sweep.py [--out DIR]
Plots need matplotlib.
"""

import argparse
from pathlib import Path

from raptor.cli import main as cli_main

CONFIGS = Path(__file__).parent / "configs"


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("reliability_sweep", "flight_size_sweep"):
        csv_path = out / f"{name}.csv"
        if cli_main(["sweep", str(CONFIGS / f"{name}.json"), "-o", str(csv_path)]) != 0:
            raise SystemExit(1)
        print(csv_path.read_text())
        cli_main(["report", str(csv_path), "-o", str(out / name)])


if __name__ == "__main__":
    main()
