"""Extra-parameter accounting and rotation timing."""

from __future__ import annotations

import csv
import io
import statistics
import time
from contextlib import nullcontext
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .attention import AttentionBatch, rotate_qk
from .io import atomic_write
from .ropefamily import ModelDims, Variant, build

MIN_REPEATS = 5

BENCH_FIELDS = ["variant", "d", "h", "b", "N", "n", "repeats", "median_ns", "per_token_ns"]
SWEEP_FIELDS = ["variant", "d", "h", "b", "N", "L", "extra_params",
                "n", "repeats", "median_ns", "per_token_ns"]


def formula_params(variant: str, dims: ModelDims, n: int | None = None) -> Fraction:
    """Closed-form extra parameter count over all L layers (APE needs ``n``)."""
    L, N, d, b = dims.L, dims.N, dims.d, dims.b
    if variant == "ape":
        if n is None:
            raise ValueError("APE parameter count needs the token count n")
        return Fraction(n * d)
    v = Variant(variant)
    if v is Variant.VANILLA:
        return Fraction(0)
    if v is Variant.LIERE:
        return Fraction(L * N * d * b)
    if v is Variant.AP:
        return Fraction(L * d * b)
    return L * d * (b + Fraction(N, b))


def enumerate_params(variant: str, dims: ModelDims, n: int | None = None) -> int:
    """Trainable scalars in one constructed set, times the layer count."""
    if variant == "ape":
        return int(formula_params(variant, dims, n))
    aset = build(variant, dims)
    return dims.L * aset.n_trainable()


@dataclass(frozen=True)
class ParamCount:
    variant: str
    dims: ModelDims
    extra_params: int
    formula: Fraction

    @property
    def formula_is_integer(self) -> bool:
        return self.formula.denominator == 1


def count_extra_params(variant: str, dims: ModelDims, n: int | None = None) -> ParamCount:
    """Enumerated count, cross-checked against the closed form whenever that is an integer."""
    variant = variant if variant == "ape" else Variant(variant).value
    if variant != "ape":
        dims.check_variant(variant)
    enumerated = enumerate_params(variant, dims, n)
    formula = formula_params(variant, dims, n)
    if formula.denominator == 1 and formula != enumerated:
        raise AssertionError(f"{variant}: enumerated {enumerated} != closed form {formula}")
    return ParamCount(variant, dims, enumerated, formula)


@dataclass(frozen=True)
class TimingRecord:
    variant: str
    dims: ModelDims
    n: int
    repeats: int
    median_ns: int
    min_ns: int
    max_ns: int

    @property
    def per_token_ns(self) -> float:
        return self.median_ns / self.n

    def row(self) -> dict:
        return {"variant": self.variant, "d": self.dims.d, "h": self.dims.h, "b": self.dims.b,
                "N": self.dims.N, "n": self.n, "repeats": self.repeats,
                "median_ns": self.median_ns, "per_token_ns": self.per_token_ns}


def _thread_limit(single_threaded: bool):
    if not single_threaded:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(1)


def time_rotation(variant: str, dims: ModelDims, n: int, repeats: int = MIN_REPEATS,
                  warmup: int = 1, seed: int = 0, single_threaded: bool = True) -> TimingRecord:
    """Wall time of ``rotate_qk`` on a random batch with coordinates in [0, 1]."""
    if repeats < MIN_REPEATS:
        raise ValueError(f"repeats must be at least {MIN_REPEATS}, got {repeats}")
    rng = np.random.default_rng(seed)
    aset = build(variant, dims, rng=rng)
    batch = AttentionBatch.random(n, dims.h, dims.d_head, rng)
    coords = rng.uniform(0.0, 1.0, size=(n, dims.N))
    samples = []
    with _thread_limit(single_threaded):
        for _ in range(warmup):
            rotate_qk(batch, aset, coords)
        for _ in range(repeats):
            t0 = time.perf_counter_ns()
            rotate_qk(batch, aset, coords)
            samples.append(time.perf_counter_ns() - t0)
    return TimingRecord(Variant(variant).value, dims, n, repeats,
                        int(statistics.median(samples)), min(samples), max(samples))


def fit_exponent(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log(y) against log(x)."""
    slope, _ = np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)
    return float(slope)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_bench_csv(records: Iterable[TimingRecord], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_FIELDS)
    for r in records:
        row = r.row()
        w.writerow([_fmt(row[k]) for k in BENCH_FIELDS])
    text = buf.getvalue()
    if path is not None:
        atomic_write(path, text)
    return text


def sweep(variants: Sequence[str], dims_list: Sequence[ModelDims], n: int = 196,
          repeats: int = MIN_REPEATS, params_only: bool = False, seed: int = 0,
          single_threaded: bool = True) -> list[dict]:
    """Parameter counts (and optionally timings) for every variant x dims pair."""
    rows = []
    for dims in dims_list:
        for v in variants:
            pc = count_extra_params(v, dims)
            row = {"variant": pc.variant, "d": dims.d, "h": dims.h, "b": dims.b, "N": dims.N,
                   "L": dims.L, "extra_params": pc.extra_params,
                   "n": None, "repeats": None, "median_ns": None, "per_token_ns": None}
            if not params_only:
                tr = time_rotation(v, dims, n, repeats, seed=seed, single_threaded=single_threaded)
                row.update(n=n, repeats=tr.repeats, median_ns=tr.median_ns,
                           per_token_ns=tr.per_token_ns)
            rows.append(row)
    return rows


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_FIELDS)
    for row in rows:
        w.writerow([_fmt(row[k]) for k in SWEEP_FIELDS])
    return buf.getvalue()
