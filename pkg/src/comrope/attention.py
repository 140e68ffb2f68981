"""Query/key rotation, pre-softmax logits and their parameter gradients."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .linalg import expm_frechet, expm_skew
from .ropefamily import AngleMatrixSet, Variant, axis_mask, rotation, rotation_blocks

MAGIC = b"CRPE"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True, eq=False)
class AttentionBatch:
    """Queries and keys, each of shape (n, h, d/h)."""

    Q: np.ndarray
    K: np.ndarray

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=np.float64)
        K = np.asarray(self.K, dtype=np.float64)
        if Q.ndim != 3 or Q.shape != K.shape:
            raise ValueError(f"Q and K must share an (n, h, d/h) shape, got {Q.shape} and {K.shape}")
        if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(K))):
            raise ValueError("batch has non-finite entries")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "K", K)

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @classmethod
    def random(cls, n: int, h: int, d_head: int, rng) -> "AttentionBatch":
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        return cls(rng.standard_normal((n, h, d_head)), rng.standard_normal((n, h, d_head)))

    def write(self, path) -> None:
        n, h, dh = self.Q.shape
        with open(Path(path), "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, n, h, dh))
            fh.write(self.Q.astype("<f8").tobytes(order="C"))
            fh.write(self.K.astype("<f8").tobytes(order="C"))

    @classmethod
    def read(cls, path) -> "AttentionBatch":
        data = Path(path).read_bytes()
        if len(data) < _HEADER.size:
            raise ValueError("truncated batch file")
        magic, version, n, h, dh = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported batch format version {version}")
        count = n * h * dh
        if len(data) != _HEADER.size + 16 * count:
            raise ValueError("batch file size does not match its header")
        body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(np.float64)
        return cls(body[:count].reshape(n, h, dh), body[count:].reshape(n, h, dh))


def _check(batch: AttentionBatch, aset: AngleMatrixSet, positions) -> np.ndarray:
    X = np.asarray(positions, dtype=np.float64)
    dims = aset.dims
    n, h, dh = batch.Q.shape
    if (h, dh) != (dims.h, dims.d_head):
        raise ValueError(f"batch has (h, d/h)=({h}, {dh}), set expects ({dims.h}, {dims.d_head})")
    if X.shape != (n, dims.N):
        raise ValueError(f"positions must have shape ({n}, {dims.N}), got {X.shape}")
    return X


def _segments(A: np.ndarray, b: int) -> np.ndarray:
    n, h, dh = A.shape
    return A.reshape(n, h, dh // b, b)


def rotate_qk(batch: AttentionBatch, aset: AngleMatrixSet, positions) -> AttentionBatch:
    """Rotate every b-length segment of q and k by its block's exp(sum_i x_i B_ij)."""
    X = _check(batch, aset, positions)
    b = aset.dims.b
    R = rotation_blocks(aset, X)
    Qh = np.einsum("thjab,thjb->thja", R, _segments(batch.Q, b))
    Kh = np.einsum("thjab,thjb->thja", R, _segments(batch.K, b))
    return AttentionBatch(Qh.reshape(batch.Q.shape), Kh.reshape(batch.K.shape))


def rotate_qk_dense(batch: AttentionBatch, aset: AngleMatrixSet, positions) -> AttentionBatch:
    """Reference path: one dense (d/h x d/h) rotation per token and head."""
    X = _check(batch, aset, positions)
    Qh = np.empty_like(batch.Q)
    Kh = np.empty_like(batch.K)
    for t in range(batch.n):
        for hd in range(aset.dims.h):
            R = rotation(aset, X[t], hd)
            Qh[t, hd] = R @ batch.Q[t, hd]
            Kh[t, hd] = R @ batch.K[t, hd]
    return AttentionBatch(Qh, Kh)


def logits(rotated: AttentionBatch) -> np.ndarray:
    """Unscaled dot products, shape (h, n, n): ``[head, i, j] = q_i . k_j``."""
    return np.einsum("iha,jha->hij", rotated.Q, rotated.K)


def relative_logit_oracle(q, k, aset: AngleMatrixSet, x, y, head: int = 0) -> float:
    """``q^T R(y - x) k``; equals the rotate-then-dot logit only for commuting sets."""
    diff = np.asarray(y, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    return float(np.asarray(q) @ rotation(aset, diff, head) @ np.asarray(k))


def logit_grad_params(batch: AttentionBatch, aset: AngleMatrixSet, positions,
                      upstream) -> dict[str, np.ndarray]:
    """Gradient of ``sum(upstream * logits(rotate_qk(...)))`` w.r.t. the set's parameters.

    Chain: logits -> rotated segments -> per-block rotation R = exp(M)
    -> generator M = sum_i x_i B_i -> blocks -> parameters. The step
    through exp uses the adjoint Fréchet derivative, L(M^T, G).
    """
    if not aset.trainable:
        raise ValueError(f"{aset.variant.value} has no trainable parameters")
    X = _check(batch, aset, positions)
    U = np.asarray(upstream, dtype=np.float64)
    n = batch.n
    if U.shape != (aset.dims.h, n, n):
        raise ValueError(f"upstream must have shape {(aset.dims.h, n, n)}, got {U.shape}")
    b = aset.dims.b

    M = np.einsum("ti,ihjab->thjab", X, aset.blocks)
    R = expm_skew(M)
    Qs, Ks = _segments(batch.Q, b), _segments(batch.K, b)
    Qh = np.einsum("thjab,thjb->thja", R, Qs)
    Kh = np.einsum("thjab,thjb->thja", R, Ks)

    gQ = np.einsum("hij,jhma->ihma", U, Kh)
    gK = np.einsum("hij,ihma->jhma", U, Qh)
    G = gQ[..., :, None] * Qs[..., None, :] + gK[..., :, None] * Ks[..., None, :]
    _, dM = expm_frechet(np.swapaxes(M, -1, -2), G)
    dB = np.einsum("ti,thjab->ihjab", X, dM)
    return _block_grad_to_params(aset, dB)


def _block_grad_to_params(aset: AngleMatrixSet, dB: np.ndarray) -> dict[str, np.ndarray]:
    def skew_pullback(g):
        return g - np.swapaxes(g, -1, -2)

    v = aset.variant
    if v is Variant.LIERE:
        return {"P": skew_pullback(dB)}
    if v is Variant.AP:
        mask = axis_mask(aset.dims)[:, None, :, None, None]
        return {"P": skew_pullback((mask * dB).sum(axis=0))}
    S = aset.params["P"] - np.swapaxes(aset.params["P"], -1, -2)
    theta = aset.params["theta"]
    g_theta = np.einsum("ihjab,hjab->ihj", dB, S)
    g_S = np.einsum("ihj,ihjab->hjab", theta, dB)
    return {"P": skew_pullback(g_S), "theta": g_theta}
