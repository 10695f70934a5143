"""Forgetting comparison: fine-tuning, ER (random and herding), COCONUT, COCONUT + S-KD.

Usage: python scripts/run_forgetting.py [--seeds 0,1,2,3,4] [--out runs/forgetting] [--jobs N]
"""

import argparse
import sys

from coconut_cil.cli import main

RUNS = [
    ("finetune", []),
    ("er", ["--selection", "random"]),
    ("er", ["--selection", "herding"]),
    ("coconut", []),
    ("coconut+skd", []),
]


def run(seeds: str, out: str, jobs: int) -> int:
    for strategy, extra in RUNS:
        code = main(["train", "--strategy", strategy, "--seeds", seeds, "--jobs", str(jobs), "--out", out, *extra])
        if code:
            return code
    return main(["report", out, "--out", out])


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--out", default="runs/forgetting")
    ap.add_argument("--jobs", type=int, default=1)
    a = ap.parse_args()
    sys.exit(run(a.seeds, a.out, a.jobs))
