"""Command-line interface.

Exit codes: 0 success, 1 validation error (bad input), 2 internal error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ValidationError
from .rng import strict_from_env, thread_limit

log = logging.getLogger("cordseg")


def _cmd_synth(args) -> int:
    from .pipeline import synth_dataset

    m = synth_dataset(args.out, args.subjects, args.females, args.males, args.machines, args.seed)
    print(f"wrote {len(m.subjects)} subjects to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .pipeline import train_from_manifest

    train_from_manifest(args.manifest, args.out, args.config, args.skip_mode, args.seed)
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_segment(args) -> int:
    from .pipeline import segment

    written = segment(args.ckpt, args.input, args.out)
    print(f"wrote {len(written)} label volume(s)")
    return 0


def _cmd_quantify(args) -> int:
    from .pipeline import merge_into, quantify

    rows = quantify(args.labels)
    merge_into(args.out, rows, ["csa_mm2", "sac_mm2", "sac_csa_ratio"])
    print(f"wrote morphometry for {len({r.subject for r in rows})} subjects to {args.out}")
    return 0


def _cmd_dti(args) -> int:
    from .pipeline import dti_metrics, merge_into

    rows = dti_metrics(args.dwi, args.labels, args.bvecs)
    merge_into(args.out, rows, ["fa", "md", "rd"])
    print(f"merged FA/MD/RD for {len({r.subject for r in rows})} subjects into {args.out}")
    return 0


def _cmd_correlate(args) -> int:
    from .pipeline import correlate

    res = correlate(args.metrics, args.group_by, args.out, args.bonferroni)
    for c in res.correlations:
        print(f"{args.group_by}={c.stratum}: r={c.r:.4f} n={c.n}")
    for c in res.comparisons:
        print(f"{c.a.stratum} vs {c.b.stratum}: z={c.z:.4f} p={c.p:.4g}")
    if res.untested:
        print(f"not tested (n < 4 or undefined r): {', '.join(res.untested)}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(seed=args.seed, include_model=not args.ops_only)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name:<20} max rel err {r.error:.3e} (tol {r.tol:g})")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return 1
    return 0


def _cmd_bench(args) -> int:
    from .bench import rows_to_csv, run_bench, scaling_ratio

    tokens = [int(t) for t in args.tokens.split(",")]
    kinds = [k.strip() for k in args.attention.split(",")]
    for k in kinds:
        if k not in ("xca", "msa"):
            raise ValidationError(f"unknown attention {k!r}; use xca, msa or xca,msa")
    rows = run_bench(kinds, tokens, args.dim, args.heads, args.repeats)
    text = rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    if 1024 in tokens and 4096 in tokens:
        for k in kinds:
            print(f"{k}: time(4096)/time(1024) = {scaling_ratio(rows, k):.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cordseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--strict", action="store_true", help="single-threaded, bit-reproducible numerics")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic cohort")
    s.add_argument("--subjects", type=int, default=None, help="number of subjects (default: females + males)")
    s.add_argument("--females", type=int, default=125)
    s.add_argument("--males", type=int, default=142)
    s.add_argument("--machines", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("train", help="train a segmentation model")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config", default=None, help='JSON {"model": {...}, "train": {...}}')
    s.add_argument("--out", required=True)
    s.add_argument("--skip-mode", choices=["attentive", "concat", "none"], default=None)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("segment", help="segment an image volume or a dataset directory")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_segment)

    s = sub.add_parser("quantify", help="per-level CSA, SAC and SAC/CSA")
    s.add_argument("--labels", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_quantify)

    s = sub.add_parser("dti", help="per-level FA, MD and RD merged into a metrics table")
    s.add_argument("--dwi", required=True)
    s.add_argument("--bvecs", default=None, help="gradient table overriding the per-subject one")
    s.add_argument("--labels", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_dti)

    s = sub.add_parser("correlate", help="FA vs SAC/CSA correlations and Fisher z-tests")
    s.add_argument("--metrics", required=True)
    s.add_argument("--group-by", choices=["gender", "machine", "level"], required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--bonferroni", action="store_true")
    s.set_defaults(func=_cmd_correlate)

    s = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ops-only", action="store_true")
    s.set_defaults(func=_cmd_gradcheck)

    s = sub.add_parser("bench", help="attention scaling benchmark")
    s.add_argument("--attention", default="xca,msa")
    s.add_argument("--tokens", default="256,1024,4096")
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--out", default=None)
    s.set_defaults(func=_cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with thread_limit(strict=args.strict or strict_from_env()):
            return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
