"""Command-line driver.

Exit codes: 0 success, 1 unexpected suite failure, 2 usage or validation error.
The seed comes from ``--seed``, else ``COMROPE_SEED``, else fresh entropy
(printed to stderr so the run can be replayed).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import __version__
from .attention import AttentionBatch
from .bench import sweep, sweep_csv
from .io import atomic_write
from .ropefamily import DimensionError, ModelDims, Variant, build
from .toytask import DEFAULT_LR, TrainingDiverged, gen_synthetic, train
from .verify import check_offset_invariance, reports_to_csv, run_all

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
SEED_ENV = "COMROPE_SEED"
SUITES = ("rope-equation", "exp-sum", "orthogonality", "offset-invariance")


class UsageError(Exception):
    pass


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    return vals


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _variant_list(text: str) -> list[str]:
    out = [v.strip() for v in text.split(",") if v.strip()]
    for v in out:
        try:
            Variant(v)
        except ValueError:
            raise argparse.ArgumentTypeError(f"unknown variant {v!r}")
    return out


def _common(p: argparse.ArgumentParser, d=768, h=12, b=8, axes=2, layers=12, variant=True):
    if variant:
        p.add_argument("--variant", choices=[v.value for v in Variant], default="ld")
    p.add_argument("--d", type=int, default=d, help="embedding dimension")
    p.add_argument("--h", type=int, default=h, help="attention heads")
    p.add_argument("--b", type=int, default=b, help="block size")
    p.add_argument("--axes", type=int, default=axes, help="coordinate axes N")
    p.add_argument("--layers", type=int, default=layers, help="layer count L")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output path (default: stdout)")
    p.add_argument("--format", choices=["json", "csv"], default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="comrope", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the theorem suites for one variant")
    _common(p)
    p.add_argument("--tol", action="append", default=[], metavar="[SUITE=]VALUE",
                   help="tolerance override, for all suites or one suite; repeatable")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--save-set", default=None, help="also write the angle-matrix set as JSON")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="parameter counts and rotation timings")
    _common(p, variant=False)
    p.add_argument("--variants", type=_variant_list, default=["liere", "ap", "ld"])
    p.add_argument("--sweep-b", type=_int_list, default=None,
                   help="comma-separated block sizes (default: --b)")
    p.add_argument("--n", type=int, default=196, help="tokens per timed batch")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--params-only", action="store_true")
    p.add_argument("--parallel", action="store_true", help="allow multi-threaded BLAS")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate-offset", help="logit drift under a global coordinate offset")
    _common(p, variant=False)
    p.add_argument("--variants", type=_variant_list, default=["ld", "liere"])
    p.add_argument("--rho", type=_float_list, default=[0.0, 1.0, 10.0, 100.0])
    p.add_argument("--trials", type=int, default=5, help="offset draws per rho")
    p.add_argument("--n-tokens", type=int, default=16)
    p.set_defaults(func=cmd_ablate_offset)

    p = sub.add_parser("train-toy", help="gradient descent on the synthetic relative task")
    _common(p, d=16, h=1, b=4, axes=2, layers=1)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=DEFAULT_LR)
    p.add_argument("--n-tokens", type=int, default=8)
    p.add_argument("--samples", type=int, default=8)
    p.set_defaults(func=cmd_train_toy, format="csv")
    return parser


def resolve_seed(flag: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}")
    seed = int(np.random.SeedSequence().entropy % (2 ** 63))
    print(f"seed: {seed}", file=sys.stderr)
    return seed


def _dims(args, b: int | None = None) -> ModelDims:
    try:
        return ModelDims(args.d, args.h, args.b if b is None else b, args.axes, args.layers)
    except DimensionError as exc:
        raise UsageError(str(exc))


def _emit(args, text: str) -> None:
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)


def _rows_csv(fields, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in fields])
    return buf.getvalue()


def _parse_tol(items: list[str]) -> dict:
    tol = {}
    for item in items:
        name, _, value = item.rpartition("=")
        try:
            v = float(value)
        except ValueError:
            raise UsageError(f"bad --tol value {item!r}")
        if name and name not in SUITES:
            raise UsageError(f"unknown suite {name!r} in --tol; choose from {', '.join(SUITES)}")
        for s in ([name] if name else SUITES):
            tol[s] = v
    return tol


def cmd_verify(args) -> int:
    dims = _dims(args)
    try:
        dims.check_variant(args.variant)
    except DimensionError as exc:
        raise UsageError(str(exc))
    seed = resolve_seed(args.seed)
    aset = build(args.variant, dims, rng=seed)
    if args.save_set:
        atomic_write(args.save_set, aset.to_json())
    reports = run_all(aset, seed=seed, trials=args.trials, tol=_parse_tol(args.tol))
    for r in reports:
        status = "pass" if r.passed else ("FAIL" if r.expected_to_pass else "fail (expected)")
        print(f"{args.variant:8s} {r.suite:18s} max_residual={r.max_residual:.3e} "
              f"tol={r.tolerance:.1e} {status}", file=sys.stderr)
    if (args.format or "json") == "csv":
        _emit(args, reports_to_csv(reports))
    else:
        _emit(args, json.dumps([json.loads(r.to_json()) for r in reports], indent=2) + "\n")
    return EXIT_OK if all(r.ok for r in reports) else EXIT_FAIL


def cmd_bench(args) -> int:
    bs = args.sweep_b if args.sweep_b is not None else [args.b]
    if not bs:
        raise UsageError("--sweep-b is empty")
    if args.repeats < 5:
        raise UsageError("--repeats must be at least 5")
    dims_list = [_dims(args, b) for b in bs]
    for dims in dims_list:
        for v in args.variants:
            try:
                dims.check_variant(v)
            except DimensionError as exc:
                raise UsageError(str(exc))
    seed = resolve_seed(args.seed)
    rows = sweep(args.variants, dims_list, n=args.n, repeats=args.repeats,
                 params_only=args.params_only, seed=seed, single_threaded=not args.parallel)
    if (args.format or "csv") == "json":
        _emit(args, json.dumps({"parallel": args.parallel, "rows": rows}, indent=2) + "\n")
    else:
        _emit(args, sweep_csv(rows))
    return EXIT_OK


def cmd_ablate_offset(args) -> int:
    dims = _dims(args)
    for v in args.variants:
        try:
            dims.check_variant(v)
        except DimensionError as exc:
            raise UsageError(str(exc))
    if any(r < 0 for r in args.rho):
        raise UsageError("rho values must be non-negative")
    seed = resolve_seed(args.seed)
    rng = np.random.default_rng(seed)
    batch = AttentionBatch.random(args.n_tokens, dims.h, dims.d_head, rng)
    coords = rng.uniform(0.0, 1.0, size=(args.n_tokens, dims.N))
    rows = []
    for v in args.variants:
        aset = build(v, dims, rng=seed)
        for r in check_offset_invariance(aset, batch, coords, args.rho, args.trials, seed):
            rows.append({"variant": v, "rho": r.rho, "max_drift": r.max_drift})
    if (args.format or "csv") == "json":
        _emit(args, json.dumps(rows, indent=2) + "\n")
    else:
        _emit(args, _rows_csv(["variant", "rho", "max_drift"], rows))
    return EXIT_OK


def cmd_train_toy(args) -> int:
    if not Variant(args.variant).trainable:
        raise UsageError(f"variant {args.variant} has no trainable parameters")
    if args.steps < 0:
        raise UsageError("--steps must be non-negative")
    dims = _dims(args)
    try:
        dims.check_variant(args.variant)
    except DimensionError as exc:
        raise UsageError(str(exc))
    seed = resolve_seed(args.seed)
    data = gen_synthetic(args.n_tokens, dims, args.samples, rng=seed)
    try:
        trace = train(data, args.variant, dims, args.steps, args.lr, rng=seed + 1)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    if args.format == "json":
        _emit(args, json.dumps({"loss": trace.losses, "grad_norm": trace.grad_norms}) + "\n")
    else:
        _emit(args, trace.to_csv())
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"comrope {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
