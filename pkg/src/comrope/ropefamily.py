"""Angle-matrix sets for the RoPE family and the rotation R(x) = exp(sum_i x_i A_i).

Every angle matrix A_i is block diagonal with ``m_head = d / (h b)`` skew
blocks of order ``b`` per head, so a set is stored as one array of shape
``(N, h, m_head, b, b)``. Blocks are always derived from the trainable
parameters, which are what get serialised and differentiated:

=========  =================================  ==========================
variant    parameters                         block (axis i, head, j)
=========  =================================  ==========================
vanilla    none                               freq_j * J2 if j serves i
liere      P: (N, h, m, b, b)                 P[i] - P[i]^T
ap         P: (h, m, b, b)                    P[j] - P[j]^T if j serves i
ld         P: (h, m, b, b), theta: (N, h, m)  theta[i] * (P - P^T)
=========  =================================  ==========================

Block ``j`` (1-based) serves axis ``((j - 1) mod N) + 1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

import numpy as np

from .linalg import block_diag, expm_skew, skew_from_param

DEFAULT_INIT_SCALE = 0.2
DEFAULT_THETA_BASE = 1.0 / 10000.0

J2 = np.array([[0.0, -1.0], [1.0, 0.0]])


class Variant(str, Enum):
    VANILLA = "vanilla"
    LIERE = "liere"
    AP = "ap"
    LD = "ld"

    @property
    def trainable(self) -> bool:
        return self is not Variant.VANILLA

    @property
    def commuting(self) -> bool:
        """Whether the construction guarantees pairwise commuting generators."""
        return self is not Variant.LIERE


class DimensionError(ValueError):
    """Model dimensions are inconsistent with each other or with a variant."""


@dataclass(frozen=True)
class ModelDims:
    d: int
    h: int
    b: int
    N: int
    L: int = 1

    def __post_init__(self):
        for name in ("d", "h", "b", "N", "L"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise DimensionError(f"{name} must be a positive integer, got {v!r}")
        if self.d % self.h:
            raise DimensionError(f"h={self.h} does not divide d={self.d}")
        if (self.d // self.h) % self.b:
            raise DimensionError(f"b={self.b} does not divide d/h={self.d // self.h}")

    @property
    def d_head(self) -> int:
        return self.d // self.h

    @property
    def m_head(self) -> int:
        return self.d // (self.h * self.b)

    def check_variant(self, variant: Variant | str) -> None:
        variant = Variant(variant)
        if variant in (Variant.AP, Variant.VANILLA) and self.m_head % self.N:
            raise DimensionError(
                f"{variant.value}: N={self.N} must divide the per-head block count {self.m_head}")
        if variant is Variant.VANILLA and self.b != 2:
            raise DimensionError(f"vanilla RoPE needs b=2, got b={self.b}")

    def as_dict(self) -> dict:
        return {"d": self.d, "h": self.h, "b": self.b, "N": self.N, "L": self.L}


def axis_of_block(dims: ModelDims) -> np.ndarray:
    """0-based axis served by each 0-based block index."""
    return np.arange(dims.m_head) % dims.N


def axis_mask(dims: ModelDims) -> np.ndarray:
    """``(N, m_head)`` 0/1 mask: 1 where block j serves axis i."""
    return (axis_of_block(dims)[None, :] == np.arange(dims.N)[:, None]).astype(np.float64)


def vanilla_frequencies(dims: ModelDims, theta_base: float = DEFAULT_THETA_BASE) -> np.ndarray:
    """Angular frequency of each block: ``theta_base ** (2N j / d_head)``, j = 1..m_head."""
    j = np.arange(1, dims.m_head + 1)
    return theta_base ** (2.0 * dims.N * j / dims.d_head)


def blocks_from_params(variant, dims: ModelDims, params: Mapping[str, np.ndarray],
                       theta_base: float = DEFAULT_THETA_BASE) -> np.ndarray:
    variant = Variant(variant)
    N, h, m, b = dims.N, dims.h, dims.m_head, dims.b
    if variant is Variant.VANILLA:
        gen = vanilla_frequencies(dims, theta_base)[:, None, None] * J2       # (m, 2, 2)
        out = axis_mask(dims)[:, None, :, None, None] * gen[None, None]       # (N, 1, m, 2, 2)
        return np.broadcast_to(out, (N, h, m, b, b)).copy()
    if variant is Variant.LIERE:
        return skew_from_param(params["P"])
    if variant is Variant.AP:
        S = skew_from_param(params["P"])
        return axis_mask(dims)[:, None, :, None, None] * S[None]
    S = skew_from_param(params["P"])
    return params["theta"][..., None, None] * S[None]


def param_shapes(variant, dims: ModelDims) -> dict[str, tuple[int, ...]]:
    variant = Variant(variant)
    N, h, m, b = dims.N, dims.h, dims.m_head, dims.b
    return {
        Variant.VANILLA: {},
        Variant.LIERE: {"P": (N, h, m, b, b)},
        Variant.AP: {"P": (h, m, b, b)},
        Variant.LD: {"P": (h, m, b, b), "theta": (N, h, m)},
    }[variant]


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AngleMatrixSet:
    """Immutable set of N block-diagonal skew generators."""

    variant: Variant
    dims: ModelDims
    params: dict = field(default_factory=dict)
    seed: int | None = None
    theta_base: float = DEFAULT_THETA_BASE
    blocks: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        variant = Variant(self.variant)
        object.__setattr__(self, "variant", variant)
        self.dims.check_variant(variant)
        shapes = param_shapes(variant, self.dims)
        if set(self.params) != set(shapes):
            raise ValueError(f"{variant.value} expects parameters {sorted(shapes)}, "
                             f"got {sorted(self.params)}")
        params = {}
        for k, shape in shapes.items():
            arr = _readonly(self.params[k])
            if arr.shape != shape:
                raise DimensionError(f"parameter {k} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {k} has non-finite entries")
            params[k] = arr
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "blocks", _readonly(
            blocks_from_params(variant, self.dims, params, self.theta_base)))

    @property
    def trainable(self) -> bool:
        return self.variant.trainable

    def n_trainable(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def with_params(self, params: Mapping[str, np.ndarray]) -> "AngleMatrixSet":
        return AngleMatrixSet(self.variant, self.dims, dict(params), self.seed, self.theta_base)

    def generator(self, x, head: int) -> np.ndarray:
        """Per-block generators ``sum_i x_i B_ij`` for one head, shape (m, b, b)."""
        x = _coordinate(x, self.dims.N)
        return np.einsum("i,ijab->jab", x, self.blocks[:, head])

    def dense_angle_matrix(self, axis: int, head: int) -> np.ndarray:
        return block_diag(list(self.blocks[axis, head]))

    # serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "dims": self.dims.as_dict(),
            "seed": self.seed,
            "theta_base": self.theta_base,
            "params": {k: v.tolist() for k, v in self.params.items()},
            "blocks": self.blocks.tolist(),
        }

    def to_json(self) -> str:
        # json emits floats via repr(), the shortest round-trip form
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: Mapping) -> "AngleMatrixSet":
        out = cls(Variant(doc["variant"]), ModelDims(**doc["dims"]),
                  {k: np.array(v, dtype=np.float64) for k, v in doc["params"].items()},
                  doc.get("seed"), float(doc.get("theta_base", DEFAULT_THETA_BASE)))
        if "blocks" in doc and not np.array_equal(out.blocks, np.array(doc["blocks"])):
            raise ValueError("stored blocks disagree with the stored parameters")
        return out

    @classmethod
    def from_json(cls, text: str) -> "AngleMatrixSet":
        return cls.from_dict(json.loads(text))


def _coordinate(x, N: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape != (N,):
        raise ValueError(f"coordinate has length {x.size}, expected N={N}")
    if not np.all(np.isfinite(x)):
        raise ValueError("coordinate has non-finite entries")
    return x


def _rng(rng) -> tuple[np.random.Generator | None, int | None]:
    if rng is None or isinstance(rng, np.random.Generator):
        return rng, None
    return np.random.default_rng(int(rng)), int(rng)


def _gaussian(rng, shape, scale):
    if rng is None:
        return np.zeros(shape)
    return scale * rng.standard_normal(shape)


# constructors --------------------------------------------------------
# ``rng`` may be a seed, a numpy Generator, or None for zero
# initialisation (identity rotations everywhere).

def build_vanilla(dims: ModelDims, theta_base: float = DEFAULT_THETA_BASE) -> AngleMatrixSet:
    return AngleMatrixSet(Variant.VANILLA, dims, {}, None, theta_base)


def build_liere(dims: ModelDims, rng=None, init_scale: float = DEFAULT_INIT_SCALE,
                P=None) -> AngleMatrixSet:
    gen, seed = _rng(rng)
    if P is None:
        P = _gaussian(gen, param_shapes(Variant.LIERE, dims)["P"], init_scale)
    return AngleMatrixSet(Variant.LIERE, dims, {"P": P}, seed)


def build_comrope_ap(dims: ModelDims, P=None, rng=None,
                     init_scale: float = DEFAULT_INIT_SCALE) -> AngleMatrixSet:
    dims.check_variant(Variant.AP)
    gen, seed = _rng(rng)
    if P is None:
        P = _gaussian(gen, param_shapes(Variant.AP, dims)["P"], init_scale)
    return AngleMatrixSet(Variant.AP, dims, {"P": P}, seed)


def build_comrope_ld(dims: ModelDims, P=None, theta=None, rng=None,
                     init_scale: float = DEFAULT_INIT_SCALE) -> AngleMatrixSet:
    """LD set; ``theta`` may be a length-N vector shared by every block or a full (N, h, m) array."""
    gen, seed = _rng(rng)
    shapes = param_shapes(Variant.LD, dims)
    if P is None:
        P = _gaussian(gen, shapes["P"], init_scale)
    if theta is None:
        theta = _gaussian(gen, shapes["theta"], 1.0)
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape == (dims.N,):
        theta = np.broadcast_to(theta[:, None, None], shapes["theta"])
    return AngleMatrixSet(Variant.LD, dims, {"P": P, "theta": theta}, seed)


def build(variant, dims: ModelDims, rng=None, init_scale: float = DEFAULT_INIT_SCALE,
          theta_base: float = DEFAULT_THETA_BASE) -> AngleMatrixSet:
    variant = Variant(variant)
    if variant is Variant.VANILLA:
        return build_vanilla(dims, theta_base)
    if variant is Variant.LIERE:
        return build_liere(dims, rng=rng, init_scale=init_scale)
    if variant is Variant.AP:
        return build_comrope_ap(dims, rng=rng, init_scale=init_scale)
    return build_comrope_ld(dims, rng=rng, init_scale=init_scale)


# evaluation ----------------------------------------------------------

def rotation_blocks(aset: AngleMatrixSet, X) -> np.ndarray:
    """Per-block rotations for many coordinates: X (n, N) -> (n, h, m, b, b)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != aset.dims.N:
        raise ValueError(f"coordinates must have shape (n, {aset.dims.N}), got {X.shape}")
    M = np.einsum("ti,ihjab->thjab", X, aset.blocks)
    return expm_skew(M)


def rotation(aset: AngleMatrixSet, x, head: int = 0) -> np.ndarray:
    """Dense (d/h, d/h) rotation R(x) for one head."""
    x = _coordinate(x, aset.dims.N)
    return block_diag(list(expm_skew(aset.generator(x, head))))


def commutator_residuals(aset: AngleMatrixSet) -> np.ndarray:
    """Frobenius commutator norm for every axis pair, head and block: (pairs, h, m)."""
    B = aset.blocks
    N = aset.dims.N
    out = []
    for i in range(N):
        for k in range(i + 1, N):
            C = B[i] @ B[k] - B[k] @ B[i]
            out.append(np.linalg.norm(C, axis=(-2, -1)))
    if not out:
        return np.zeros((0, aset.dims.h, aset.dims.m_head))
    return np.stack(out)


def is_pairwise_commuting(aset: AngleMatrixSet, tol: float = 1e-12) -> tuple[bool, float]:
    """Blockwise commutator check; block-diagonal matrices commute iff every block pair does."""
    res = commutator_residuals(aset)
    worst = float(res.max()) if res.size else 0.0
    return worst <= tol, worst
