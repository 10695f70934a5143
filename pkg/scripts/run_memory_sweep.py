"""COCONUT minus ER (herding) Avg Acc at 2, 4, 8 and 30 exemplars per class.

Usage: python scripts/run_memory_sweep.py [--seeds 0,1,2,3,4] [--out runs/memory] [--jobs N]
"""

import argparse
import sys

from coconut_cil.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--memory", default="2,4,8,30")
    ap.add_argument("--out", default="runs/memory")
    ap.add_argument("--jobs", type=int, default=1)
    a = ap.parse_args()
    sys.exit(
        main(
            ["sweep-memory", "--strategies", "er,coconut", "--selection", "herding", "--memory", a.memory,
             "--seeds", a.seeds, "--out", a.out, "--jobs", str(a.jobs)]
        )
    )
