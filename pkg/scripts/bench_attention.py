"""Forward-time scaling of XCA against dense (windowless) multi-head attention.

    python3 scripts/bench_attention.py --tokens 256,512,1024,2048,4096
"""
import argparse
import sys

from cordseg.bench import rows_to_csv, run_bench, scaling_ratio
from cordseg.rng import thread_limit


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tokens", default="256,512,1024,2048,4096")
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    tokens = [int(t) for t in args.tokens.split(",")]
    with thread_limit(strict=True):
        rows = run_bench(("xca", "msa"), tokens, args.dim, args.heads, args.repeats)
    sys.stdout.write(rows_to_csv(rows))
    for lo, hi in zip(tokens, tokens[1:]):
        print(f"N {lo}->{hi}: xca x{scaling_ratio(rows, 'xca', hi, lo):.2f}  "
              f"msa x{scaling_ratio(rows, 'msa', hi, lo):.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
