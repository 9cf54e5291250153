"""Run every pipeline stage on a generated fixture corpus and print the evaluation table.

    python3 scripts/pipeline_demo.py [WORK_DIR] [--seed 0] [--songs 20]
"""
import argparse
import tempfile
from pathlib import Path

from make_fixture_corpus import build

from midifill.cli import run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("work", nargs="?")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--songs", type=int, default=20)
    a = ap.parse_args()
    work = Path(a.work or tempfile.mkdtemp(prefix="midifill-demo-"))
    build(work / "raw", a.songs, clones=max(1, a.songs // 4), off_grid=3, seed=a.seed, repetitive=3)
    w = str(work)
    stages = [
        ["filter", f"{w}/raw", f"{w}/filtered"],
        ["dedupe", f"{w}/filtered", f"{w}/unique"],
        ["preprocess", f"{w}/unique", f"{w}/clean"],
        ["learn-levels", f"{w}/clean", "--out", f"{w}/levels.json"],
        ["build-pretrain", "--seed", str(a.seed), "--levels", f"{w}/levels.json", f"{w}/clean", f"{w}/pretrain.jsonl"],
        ["build-finetune", "--seed", str(a.seed), "--levels", f"{w}/levels.json", f"{w}/clean", f"{w}/finetune.jsonl"],
        ["make-testset", "--seed", str(a.seed), "--levels", f"{w}/levels.json", f"{w}/clean", f"{w}/test.jsonl"],
        ["infill-baseline", f"{w}/test.jsonl", f"{w}/outputs.jsonl"],
        ["evaluate", f"{w}/test.jsonl", f"{w}/outputs.jsonl", "--report", f"{w}/report.json",
         "--table", f"{w}/report.txt"],
    ]
    for argv in stages:
        print(f"$ midifill {' '.join(argv)}")
        code = run(argv)
        if code:
            raise SystemExit(code)
    print(f"outputs in {work}")


if __name__ == "__main__":
    main()
