"""Exit criteria. Each test records a PASS/FAIL line shown in the pytest summary."""

import time

import numpy as np

from comrope.attention import AttentionBatch, logit_grad_params, logits, rotate_qk
from comrope.bench import count_extra_params, fit_exponent, formula_params, time_rotation
from comrope.linalg import expm_skew
from comrope.ropefamily import (
    ModelDims,
    Variant,
    build,
    build_liere,
    build_vanilla,
    is_pairwise_commuting,
    rotation,
)
from comrope.toytask import eval_loss, gen_synthetic, train
from comrope.verify import (
    check_exp_sum_identity,
    check_exp_sum_matrices,
    check_offset_invariance,
    check_rope_equation,
)
from oracles import central_diff, rotary_pairs


def test_01_orthogonality(criterion):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst_orth = worst_det = 0.0
    for b in (2, 4, 8, 16):
        P = rng.standard_normal((1000, b, b))
        B = P - np.swapaxes(P, -1, -2)
        # Frobenius norms spread over [0, 50]
        B *= (rng.uniform(0, 50, 1000) / np.linalg.norm(B, axis=(-2, -1)))[:, None, None]
        R = expm_skew(B)
        worst_orth = max(worst_orth, np.linalg.norm(np.swapaxes(R, -1, -2) @ R - np.eye(b),
                                                    axis=(-2, -1)).max())
        worst_det = max(worst_det, np.abs(np.linalg.det(R) - 1).max())
    elapsed = time.perf_counter() - t0
    ok = worst_orth <= 1e-10 and worst_det <= 1e-8 and elapsed <= 10
    criterion(1, "orthogonality of exp(skew)", ok,
              f"orth={worst_orth:.2e} det={worst_det:.2e} t={elapsed:.2f}s")
    assert ok


def test_02_rope_equation(criterion):
    worst = 0.0
    for variant in ("ap", "ld"):
        for b in (2, 4, 8):
            for N in (2, 3):
                aset = build(variant, ModelDims(2 * N * b * 2, 2, b, N), rng=100 * b + N)
                worst = max(worst, check_rope_equation(aset, 100, 1e-8, seed=N).max_residual)
    ok = worst <= 1e-8
    criterion(2, "RoPE equation for AP/LD", ok, f"max residual={worst:.2e}")
    assert ok


def test_03_noncommuting_witness(criterion):
    found = {}
    for b in (3, 4, 8):
        dims = ModelDims(4 * b, 1, b, 2)
        for seed in (0, 1, 2):
            comm = rope = None
            rng = np.random.default_rng(seed)
            for trial in range(10):
                aset = build_liere(dims, rng=rng)
                if comm is None and is_pairwise_commuting(aset)[1] > 1e-2:
                    comm = trial
                x, y = rng.uniform(-4, 4, 2), rng.uniform(-4, 4, 2)
                res = np.linalg.norm(rotation(aset, x).T @ rotation(aset, y) - rotation(aset, y - x))
                if rope is None and res > 1e-4:
                    rope = trial
                if comm is not None and rope is not None:
                    break
            found[(b, seed)] = (comm, rope)
    ok = all(c is not None and r is not None for c, r in found.values())
    criterion(3, "LieRE non-commutativity witness", ok,
              "first trials (comm, rope): " + str({k: v for k, v in found.items()}))
    assert ok


def test_04_b2_degeneracy(criterion):
    worst = 0.0
    for variant in Variant:
        for N in (1, 2, 3):
            for seed in range(5):
                dims = ModelDims(2 * N * 4, 2, 2, N)
                worst = max(worst, is_pairwise_commuting(build(variant, dims, rng=seed))[1])
    aset = build_vanilla(ModelDims(64, 1, 2, 1))
    freqs = (1 / 10000) ** (2 * np.arange(1, 33) / 64)
    rng = np.random.default_rng(4)
    oracle_err = 0.0
    for m in (0, 1, 2, 17, 255, 1024):
        q = rng.standard_normal(64)
        oracle_err = max(oracle_err, np.abs(rotation(aset, [m]) @ q - rotary_pairs(q, m, freqs)).max())
    ok = worst <= 1e-12 and oracle_err <= 1e-12
    criterion(4, "b=2 sets commute; vanilla equals cos/sin RoPE", ok,
              f"commutator={worst:.2e} oracle err={oracle_err:.2e}")
    assert ok


def test_05_offset_invariance(criterion):
    rng = np.random.default_rng(5)
    drift_commuting = 0.0
    for variant, dims in [("ld", ModelDims(768, 12, 8, 2)), ("ap", ModelDims(768, 12, 8, 2)),
                          ("ld", ModelDims(64, 2, 4, 2)), ("ap", ModelDims(64, 2, 4, 2))]:
        batch = AttentionBatch.random(16, dims.h, dims.d_head, rng)
        coords = rng.uniform(0, 1, (16, dims.N))
        rows = check_offset_invariance(build(variant, dims, rng=7), batch, coords,
                                       [1.0, 10.0, 100.0], 5, seed=11)
        drift_commuting = max(drift_commuting, max(r.max_drift for r in rows))
    dims = ModelDims(64, 2, 4, 2)
    batch = AttentionBatch.random(16, dims.h, dims.d_head, rng)
    coords = rng.uniform(0, 1, (16, dims.N))
    rows = check_offset_invariance(build_liere(dims, rng=7), batch, coords, [10.0, 100.0], 5, seed=11)
    drift_liere = max(r.max_drift for r in rows)
    ok = drift_commuting <= 1e-6 and drift_liere > 1e-3
    criterion(5, "global offset invariance", ok,
              f"LD/AP drift={drift_commuting:.2e} LieRE drift={drift_liere:.2e}")
    assert ok


def test_06_exp_sum_lemma(criterion):
    worst = 0.0
    for variant in ("ap", "ld", "vanilla"):
        for N in (1, 2, 3):
            b = 2 if variant == "vanilla" else 4
            aset = build(variant, ModelDims(2 * N * b, 1, b, N), rng=N)
            worst = max(worst, check_exp_sum_identity(aset, 100, 1e-9, seed=N).max_residual)
    pair = check_exp_sum_matrices(
        [[[0, -1, 0], [1, 0, 0], [0, 0, 0]], [[0, 0, -1], [0, 0, 0], [1, 0, 0]]],
        coeffs=[1.0, 1.0], tol=1e-9)
    ok = worst <= 1e-9 and pair.max_residual > 1e-2
    criterion(6, "exp-sum lemma", ok,
              f"commuting max={worst:.2e} fixed pair={pair.max_residual:.3f}")
    assert ok


def test_07_parameter_accounting(criterion):
    mismatches = []
    for variant in ("liere", "ap", "ld"):
        for b in (2, 4, 8):
            for N in (1, 2, 4):
                dims = ModelDims(b * N * 12, 12, b, N, 12)
                pc = count_extra_params(variant, dims)
                if pc.extra_params != formula_params(variant, dims):
                    mismatches.append((variant, b, N))
    base = {v: count_extra_params(v, ModelDims(768, 12, 8, 2, 12)).extra_params
             for v in ("liere", "ap", "ld")}
    ok = not mismatches and base == {"liere": 147456, "ap": 73728, "ld": 76032}
    criterion(7, "extra-parameter counts", ok, f"{base} mismatches={mismatches}")
    assert ok


def test_08_gradients(criterion):
    dims = ModelDims(8, 1, 4, 2)
    rng = np.random.default_rng(8)
    worst = 0.0
    ok = True
    for variant in ("liere", "ap", "ld"):
        aset = build(variant, dims, rng=rng, init_scale=0.5)
        batch = AttentionBatch.random(3, 1, 8, rng)
        X = rng.uniform(-2, 2, (3, 2))
        U = rng.standard_normal((1, 3, 3))
        grads = logit_grad_params(batch, aset, X, U)
        for key, p in aset.params.items():
            def f(v, key=key):
                trial = aset.with_params({**aset.params, key: v})
                return float(np.sum(U * logits(rotate_qk(batch, trial, X))))
            fd = central_diff(f, p, 1e-5)
            err = np.abs(grads[key] - fd)
            ok &= bool(np.all(err <= np.maximum(1e-5 * np.abs(fd), 1e-9)))
            big = np.abs(fd) > 1e-9
            if big.any():
                worst = max(worst, float((err[big] / np.abs(fd[big])).max()))
    criterion(8, "Fréchet gradients vs finite differences", ok, f"max rel err={worst:.2e}")
    assert ok


def test_09_toy_training(criterion):
    dims = ModelDims(16, 1, 4, 2)
    data = gen_synthetic(8, dims, 8, rng=0)
    shifted = data.shifted(10.0, seed=3)
    ld = train(data, "ld", dims, 500, rng=1)
    liere = train(data, "liere", dims, 500, rng=1)
    ld_shift = eval_loss(ld.final, shifted) - eval_loss(ld.final, data)
    liere_shift = eval_loss(liere.final, shifted) - eval_loss(liere.final, data)
    halved = ld.losses[-1] <= 0.5 * ld.losses[0]
    ok = halved and abs(ld_shift) <= 1e-6 and liere_shift > abs(ld_shift)
    criterion(9, "toy training", ok,
              f"LD loss {ld.losses[0]:.4f}->{ld.losses[-1]:.4f}, shift delta LD={ld_shift:.1e} "
              f"LieRE={liere_shift:.1e}")
    assert ok


def _best_median(variant, dims, n, runs=3):
    return min(time_rotation(variant, dims, n, repeats=7, seed=s).median_ns for s in range(runs))


def test_10_complexity_trend(criterion):
    bs = (2, 4, 8, 16)
    n = 512
    per_token = [_best_median("ld", ModelDims(256, 4, b, 2), n) / n for b in bs]
    exponent = fit_exponent(bs, per_token)
    dims = ModelDims(256, 4, 8, 2)
    ratio = _best_median("ld", dims, 512) / _best_median("ld", dims, 256)
    ok = 1.5 <= exponent <= 3.2 and 2 * 0.7 <= ratio <= 2 * 1.3
    criterion(10, "rotation cost trend", ok, f"b-exponent={exponent:.2f} time(2n)/time(n)={ratio:.2f}")
    assert ok
