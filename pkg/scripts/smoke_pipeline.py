"""End-to-end CLI smoke run: gen-corpus, build-dataset, distill-toy, cka.

    python scripts/smoke_pipeline.py WORKDIR
"""

import sys
import time
from pathlib import Path

from tempdistill import cli


def run(*argv: str) -> None:
    code = cli.main(list(argv))
    if code:
        raise SystemExit(f"{argv[0]} exited with {code}")


def main(work: Path) -> float:
    t0 = time.time()
    run("gen-corpus", "--out", str(work / "corpus"), "--n-docs", "20", "--seed", "1")
    run("build-dataset", "--corpus", str(work / "corpus"), "--out", str(work / "qa.jsonl"), "--closure")
    run(
        "distill-toy", "--out", str(work / "matrix"), "--seeds", "1", "--steps", "200",
        "--conditions", "single_task,kd_origin", "--workers", "1",
    )
    traces = work / "matrix" / "traces"
    run(
        "cka", "--trace-a", str(traces / "single_task-seed0"), "--trace-b", str(traces / "kd_origin-seed0"),
        "--out", str(work / "cka.json"), "--projection", str(work / "projection.csv"),
    )
    return time.time() - t0


if __name__ == "__main__":
    work = Path(sys.argv[1] if len(sys.argv) > 1 else "smoke")
    print(f"pipeline finished in {main(work):.1f}s")
