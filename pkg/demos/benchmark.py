"""Run every method on the synthetic benchmark and print the comparison.

Takes a few minutes. Result files land under results/benchmark/<method>/
(or under $FINER_OUTPUT_DIR when set).

    python demos/benchmark.py [methods...]
"""
import csv
import dataclasses
import os
import sys
from pathlib import Path

from finer import cli

HERE = Path(__file__).resolve().parent
methods = sys.argv[1:] or ["ft", "logit_kd", "lgfd_no_skd", "lgfd_no_itc", "lgfd"]
config = cli.load_config(HERE / "benchmark.cfg")
root = Path(os.environ.get(cli.OUTPUT_ENV) or config.output_dir)

print(f"{'method':12s} {'old Ma-F1':>10s} {'new Ma-F1':>10s} {'all Ma-F1':>10s} {'avg Ma-F1':>10s}")
for method in methods:
    out = root / method
    cli.run(dataclasses.replace(config, method=method), str(out))
    with open(out / "metrics.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    with open(out / "summary.csv", newline="") as f:
        summary = list(csv.DictReader(f))
    last = max(int(r["task"]) for r in rows)
    final = [r for r in rows if int(r["task"]) == last]

    def mean(rs, key):
        return sum(float(r[key]) for r in rs) / len(rs)

    print(f"{method:12s} {mean(final, 'old_ma_f1'):10.3f} {mean(final, 'new_ma_f1'):10.3f} "
          f"{mean(final, 'all_ma_f1'):10.3f} {mean(summary, 'avg_ma_f1'):10.3f}")
