"""NSPT variants, MM design flags and fixed vs learned temperature.

Usage: python scripts/run_ablations.py [--grid all] [--seeds 0,1,2] [--out runs/ablate] [--jobs N]
"""

import argparse
import sys

from coconut_cil.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", default="all", choices=("nspt", "mm", "tau", "all"))
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--out", default="runs/ablate")
    ap.add_argument("--jobs", type=int, default=1)
    a = ap.parse_args()
    sys.exit(main(["ablate", "--grid", a.grid, "--seeds", a.seeds, "--out", a.out, "--jobs", str(a.jobs)]))
