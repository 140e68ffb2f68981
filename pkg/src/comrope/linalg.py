"""Small dense matrix kernels: skew construction, exp, Fréchet derivative.

Every kernel accepts either a single ``(n, n)`` matrix or a stack
``(..., n, n)`` and works on the trailing two axes.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

# Taylor core runs on matrices scaled to 1-norm <= SCALE_TARGET; at that
# radius the degree-TAYLOR_DEGREE remainder is below unit roundoff.
SCALE_TARGET = 0.5
TAYLOR_DEGREE = 14
UNIT_ROUNDOFF = 2.0 ** -53
SKEW_RTOL = 1e-14
# exp overflows double precision past this 1-norm (log(DBL_MAX) ~ 709).
MAX_NORM = 700.0


class RangeError(ArithmeticError):
    """Matrix norm too large for exp to be representable."""


def _as_square(M, name="matrix") -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise ValueError(f"{name} must be square, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} has non-finite entries")
    return M


def skew_from_param(P) -> np.ndarray:
    """Return ``P - P^T`` (exactly skew-symmetric)."""
    P = _as_square(P, "P")
    return P - np.swapaxes(P, -1, -2)


def is_skew(B, rtol: float = SKEW_RTOL) -> bool:
    B = np.asarray(B, dtype=np.float64)
    sym = np.linalg.norm(B + np.swapaxes(B, -1, -2))
    return bool(sym <= rtol * max(np.linalg.norm(B), np.finfo(float).tiny))


def _one_norm(M: np.ndarray) -> np.ndarray:
    return np.abs(M).sum(axis=-2).max(axis=-1)


def taylor_degree(theta: float) -> int:
    """Smallest degree whose series remainder bound at 1-norm ``theta`` is below roundoff."""
    term = 1.0
    for q in range(TAYLOR_DEGREE):
        term *= theta / (q + 1)
        if term <= UNIT_ROUNDOFF:
            return q
    return TAYLOR_DEGREE


def _expm_stack(M: np.ndarray, check_range: bool = True) -> np.ndarray:
    """Scaling-and-squaring on a stack ``(k, n, n)`` with per-matrix exponents."""
    n = M.shape[-1]
    norms = _one_norm(M)
    if check_range and np.any(norms > MAX_NORM):
        raise RangeError(f"matrix 1-norm {norms.max():.3g} exceeds {MAX_NORM}")
    with np.errstate(divide="ignore"):
        s = np.where(norms > SCALE_TARGET,
                     np.ceil(np.log2(np.maximum(norms, SCALE_TARGET) / SCALE_TARGET)), 0)
    s = s.astype(np.int64)
    A = M * np.ldexp(1.0, -s)[:, None, None]

    eye = np.eye(n)
    q = taylor_degree(float((norms * np.ldexp(1.0, -s)).max()) if s.size else 0.0)
    # Horner: I + A(I + A/2(I + A/3(...)))
    E = np.broadcast_to(eye, A.shape).copy()
    for k in range(q, 0, -1):
        E = eye + (A @ E) / k

    smax = int(s.max()) if s.size else 0
    for step in range(smax):
        active = s > step
        if active.all():
            E = E @ E
        else:
            E[active] = E[active] @ E[active]
    return E


def expm_general(M) -> np.ndarray:
    """exp(M) for any real square matrix (or stack of them)."""
    M = _as_square(M, "M")
    shape = M.shape
    return _expm_stack(M.reshape(-1, shape[-1], shape[-1])).reshape(shape)


def _planar(alpha: np.ndarray) -> np.ndarray:
    c, s = np.cos(alpha), np.sin(alpha)
    R = np.empty(alpha.shape + (2, 2))
    R[..., 0, 0] = c
    R[..., 0, 1] = -s
    R[..., 1, 0] = s
    R[..., 1, 1] = c
    return R


def expm_skew(B, scale: float = 1.0) -> np.ndarray:
    """exp(scale * B) for skew-symmetric B; the result is a rotation.

    2x2 blocks use the closed-form planar rotation with angle
    ``scale * B[1, 0]``; larger blocks go through scaling-and-squaring.
    """
    B = _as_square(B, "B")
    if B.shape[-1] == 2:
        return _planar(scale * B[..., 1, 0])
    # exp of a skew matrix is orthogonal, so no overflow check
    M = scale * B
    return _expm_stack(M.reshape(-1, M.shape[-1], M.shape[-1]), check_range=False).reshape(M.shape)


def expm_frechet(M, E) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(exp(M), L(M, E))`` via the block matrix ``[[M, E], [0, M]]``.

    The direction is normalised before exponentiation so that a large
    ``E`` does not force extra squarings on ``M``.
    """
    M = _as_square(M, "M")
    E = _as_square(E, "E")
    if M.shape != E.shape:
        raise ValueError(f"order mismatch: {M.shape} vs {E.shape}")
    n = M.shape[-1]
    lead = M.shape[:-2]
    Ms = M.reshape(-1, n, n)
    Es = E.reshape(-1, n, n)
    enorm = np.linalg.norm(Es, axis=(-2, -1))
    safe = np.where(enorm > 0, enorm, 1.0)
    Es = Es / safe[:, None, None]

    aug = np.zeros((Ms.shape[0], 2 * n, 2 * n))
    aug[:, :n, :n] = Ms
    aug[:, n:, n:] = Ms
    aug[:, :n, n:] = Es
    # with skew M the augmented exponential stays bounded by (1 + ||E||)
    X = _expm_stack(aug, check_range=not is_skew(M))
    expM = X[:, :n, :n].reshape(lead + (n, n))
    L = (X[:, :n, n:] * safe[:, None, None]).reshape(lead + (n, n))
    return expM, L


def commutator_residual(A, B) -> float:
    """Frobenius norm of ``AB - BA``."""
    A = _as_square(A, "A")
    B = _as_square(B, "B")
    if A.shape != B.shape:
        raise ValueError(f"order mismatch: {A.shape} vs {B.shape}")
    return float(np.linalg.norm(A @ B - B @ A))


def block_diag(blocks: Sequence[np.ndarray]) -> np.ndarray:
    blocks = [np.asarray(b, dtype=np.float64) for b in blocks]
    if not blocks:
        raise ValueError("empty block list")
    sizes = [b.shape[-1] for b in blocks]
    out = np.zeros((sum(sizes), sum(sizes)))
    i = 0
    for b, k in zip(blocks, sizes):
        out[i:i + k, i:i + k] = b
        i += k
    return out


def block_diag_expm(blocks, scales) -> np.ndarray:
    """Dense block-diagonal rotation with blocks ``expm_skew(blocks[j], scales[j])``.

    The attention path never calls this; it applies the per-block
    exponentials segment by segment. Kept for assembling reference
    matrices.
    """
    blocks = np.asarray(blocks, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    if blocks.ndim != 3 or blocks.shape[0] == 0:
        raise ValueError("blocks must be a non-empty list of equal-order square blocks")
    if scales.shape != (blocks.shape[0],):
        raise ValueError("scales length must match the number of blocks")
    scaled = blocks * scales[:, None, None]
    return block_diag(list(expm_skew(scaled)))

