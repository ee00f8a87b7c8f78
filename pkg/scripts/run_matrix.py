"""Run the full six-condition matrix and print the summary table.

    python scripts/run_matrix.py --out results/matrix --seeds 5
"""

import argparse
import sys

from tempdistill import cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/matrix")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--matrix", help="JSON matrix file (default: built-in)")
    ap.add_argument("--teacher-cache", default=".teacher_cache")
    ap.add_argument("--workers", type=int)
    args = ap.parse_args()
    argv = ["distill-toy", "--out", args.out, "--seeds", str(args.seeds), "--teacher-cache", args.teacher_cache, "--log-level", "INFO"]
    if args.matrix:
        argv += ["--matrix", args.matrix]
    if args.workers:
        argv += ["--workers", str(args.workers)]
    return cli.main(argv)


if __name__ == "__main__":
    sys.exit(main())
