"""Full pipeline on a small synthetic cohort, run twice to check that
strict mode reproduces every output byte.

    python3 scripts/run_pipeline.py --subjects 10 --work /tmp/cordseg-e2e
"""
import argparse
import json
import sys
import time
from pathlib import Path

from cordseg.experiments import run_pipeline, tree_digest


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--subjects", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--work", default="cordseg-e2e")
    ap.add_argument("--config", default=None, help='JSON {"model": {...}, "train": {...}}')
    ap.add_argument("--once", action="store_true", help="skip the reproducibility rerun")
    args = ap.parse_args(argv)
    cfg = json.loads(Path(args.config).read_text()) if args.config else None

    digests = []
    for i in range(1 if args.once else 2):
        t0 = time.perf_counter()
        w = run_pipeline(Path(args.work) / f"run{i + 1}", args.subjects, args.seed, cfg)
        digests.append(tree_digest(w))
        print(f"run {i + 1}: {len(digests[-1])} files in {time.perf_counter() - t0:.0f}s")
    print((Path(args.work) / "run1" / "corr_gender.csv").read_text())
    if len(digests) == 2:
        diff = sorted(k for k in digests[0].keys() | digests[1].keys() if digests[0].get(k) != digests[1].get(k))
        print("byte-identical" if not diff else f"differences: {diff}")
        return 1 if diff else 0
    return 0


if __name__ == "__main__":
    sys.exit(main())
