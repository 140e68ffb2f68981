"""Synthetic relative-position task and a plain gradient-descent trainer.

Targets come from a fixed commuting teacher evaluated in relative form,
``target[h, i, j] = q_i^T R_teacher(x_j - x_i) k_j``, so they depend on the
coordinates only through pairwise differences.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionBatch, logit_grad_params, logits, rotate_qk
from .coords import OffsetConfig, global_offset
from .linalg import RangeError, expm_skew
from .ropefamily import AngleMatrixSet, ModelDims, Variant, build, build_comrope_ld

TEMPLATE = "q_i^T exp(sum_a (x_j - x_i)_a B_a) k_j with a fixed random ComRoPE-LD teacher"
DEFAULT_LR = 1.0


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class Sample:
    coords: np.ndarray      # (n, N)
    batch: AttentionBatch
    target: np.ndarray      # (h, n, n)


@dataclass
class ToyDataset:
    samples: list[Sample]
    seed: int | None
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def shifted(self, rho: float, seed: int | None = 0) -> "ToyDataset":
        """Same samples with one global offset per sample added to the coordinates."""
        rng = np.random.default_rng(seed)
        out = [Sample(global_offset(s.coords, OffsetConfig(rho), rng=rng)[0], s.batch, s.target)
               for s in self.samples]
        return ToyDataset(out, self.seed, {**self.metadata, "offset_rho": rho})


def relative_targets(batch: AttentionBatch, teacher: AngleMatrixSet, coords) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    diff = coords[None, :, :] - coords[:, None, :]                     # [i, j] = x_j - x_i
    M = np.einsum("ija,ahmbc->ijhmbc", diff, teacher.blocks)
    R = expm_skew(M)
    b = teacher.dims.b
    n, h, dh = batch.Q.shape
    Ks = batch.K.reshape(n, h, dh // b, b)
    Qs = batch.Q.reshape(n, h, dh // b, b)
    RK = np.einsum("ijhmbc,jhmc->ijhmb", R, Ks)
    return np.einsum("ihmb,ijhmb->hij", Qs, RK)


def gen_synthetic(n_tokens: int, dims: ModelDims, n_samples: int, rng=0,
                  teacher_scale: float = 1.0) -> ToyDataset:
    seed = None if isinstance(rng, np.random.Generator) else rng
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    teacher = build_comrope_ld(dims, rng=gen, init_scale=teacher_scale)
    samples = []
    for _ in range(n_samples):
        coords = gen.uniform(0.0, 1.0, size=(n_tokens, dims.N))
        batch = AttentionBatch(gen.standard_normal((n_tokens, dims.h, dims.d_head)),
                               gen.standard_normal((n_tokens, dims.h, dims.d_head)))
        batch = AttentionBatch(batch.Q / np.sqrt(dims.d_head), batch.K / np.sqrt(dims.d_head))
        samples.append(Sample(coords, batch, relative_targets(batch, teacher, coords)))
    return ToyDataset(samples, seed, {"template": TEMPLATE, "teacher": teacher.to_dict(),
                                      "n_tokens": n_tokens, "dims": dims.as_dict()})


def loss_and_grad(aset: AngleMatrixSet, data: ToyDataset, with_grad: bool = True):
    """Mean squared logit error over all samples and entries."""
    total = 0.0
    grads = {k: np.zeros_like(v) for k, v in aset.params.items()} if with_grad else None
    if not data.samples:
        return 0.0, grads
    count = len(data.samples) * data.samples[0].target.size
    for s in data.samples:
        resid = logits(rotate_qk(s.batch, aset, s.coords)) - s.target
        total += float((resid ** 2).sum())
        if with_grad:
            g = logit_grad_params(s.batch, aset, s.coords, 2.0 * resid / count)
            for k in grads:
                grads[k] += g[k]
    return total / count, grads


def eval_loss(aset: AngleMatrixSet, data: ToyDataset) -> float:
    return loss_and_grad(aset, data, with_grad=False)[0]


@dataclass
class TrainTrace:
    losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    final: AngleMatrixSet | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "grad_norm"])
        for i, (l, g) in enumerate(zip(self.losses, self.grad_norms)):
            w.writerow([i, repr(l), repr(g)])
        return buf.getvalue()


def init_student(variant, dims: ModelDims, rng=0, init_scale: float = 0.2) -> AngleMatrixSet:
    variant = Variant(variant)
    if not variant.trainable:
        raise ValueError(f"{variant.value} has no trainable parameters")
    return build(variant, dims, rng=rng, init_scale=init_scale)


def train(data: ToyDataset, variant, dims: ModelDims, steps: int, lr: float = DEFAULT_LR,
          rng=0, init_scale: float = 0.2, start: AngleMatrixSet | None = None) -> TrainTrace:
    """Gradient descent on the mean squared logit error; one entry per step, recorded pre-update."""
    aset = start if start is not None else init_student(variant, dims, rng, init_scale)
    if not aset.trainable:
        raise ValueError(f"{aset.variant.value} has no trainable parameters")
    trace = TrainTrace()
    for step in range(steps):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = loss_and_grad(aset, data)
        except (RangeError, ValueError) as exc:
            # non-finite parameters surface as validation errors downstream
            raise TrainingDiverged(step) from exc
        gnorm = float(np.sqrt(sum((g ** 2).sum() for g in grads.values())))
        if not (np.isfinite(loss) and np.isfinite(gnorm)):
            raise TrainingDiverged(step)
        trace.losses.append(loss)
        trace.grad_norms.append(gnorm)
        try:
            aset = aset.with_params({k: aset.params[k] - lr * grads[k] for k in grads})
        except ValueError as exc:
            raise TrainingDiverged(step) from exc
    trace.final = aset
    return trace
