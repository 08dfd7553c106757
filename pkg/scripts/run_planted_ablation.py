"""Full pipeline on synthetic footage: generate, preprocess, extract (stub), ablate.

Runs every stage through the ``crtreg`` CLI so the script doubles as an
integration smoke test.

    python3 scripts/run_planted_ablation.py out/ --runners 30 --regressors LINEAR,MLP --folds 5 --repetitions 1
"""

import argparse
import sys
import time
from pathlib import Path

from crtreg.cli import main as crtreg
from crtreg.synthetic import SyntheticSpec, make_synthetic_dataset


def stage(name, argv):
    started = time.monotonic()
    code = crtreg(argv)
    print(f"[{name}] exit {code} in {time.monotonic() - started:.1f}s", file=sys.stderr)
    if code:
        sys.exit(code)


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("workdir")
    parser.add_argument("--runners", type=int, default=30)
    parser.add_argument("--regressors", default="LINEAR,MLP")
    parser.add_argument("--folds", type=int, default=5)
    parser.add_argument("--repetitions", type=int, default=1)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    work = Path(args.workdir)
    manifest = make_synthetic_dataset(work / "data", SyntheticSpec(n_runners=args.runners, seed=args.seed))
    common = ["--manifest", manifest.source, "--store", str(work / "processed"), "--cache", str(work / "cache"),
              "--reports", str(work / "reports"), "--workers", str(args.workers)]
    stage("preprocess", ["preprocess", *common, "--context", "both"])
    stage("extract", ["extract", *common, "--context", "both", "--tap", "both", "--stub"])
    stage("ablate", ["ablate", *common, "--regressors", args.regressors, "--folds", str(args.folds),
                     "--repetitions", str(args.repetitions), "--seed", str(args.seed), "--plot"])
    stage("report", ["report", str(work / "reports" / "ablation.jsonl"), "--units", "minutes"])


if __name__ == "__main__":
    main()
