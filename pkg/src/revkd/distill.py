"""Distillation losses: logit mixing, the epoch-wise mixing schedule, forward and
reverse KL with temperature compensation, teacher combination, chunked
(step-wise) evaluation and the total training loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from revkd import _kernels
from revkd import autodiff as ad
from revkd.autodiff import Tensor
from revkd.model import ModelConfig, Weights, forward, logits_no_grad

OBJECTIVES = ("reverse", "forward")
COMBINATIONS = ("auto", "mean-loss", "mean-prob")
REDUCTIONS = ("mean", "sum")


@dataclass(frozen=True)
class DistillConfig:
    objective: str = "reverse"
    temperature: float = 2.0
    alpha: float = 0.5
    beta_start: float = 0.7
    beta_floor: float = 0.1
    progressive: bool = True
    stepwise: bool = True
    chunk_size: int = 5
    teacher_count: int = 1
    teacher_combination: str = "auto"
    reduction: str = "mean"

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.beta_start <= 1.0:
            raise ValueError(f"beta_start must lie in [0, 1], got {self.beta_start}")
        if not 0.0 <= self.beta_floor <= 1.0:
            raise ValueError(f"beta_floor must lie in [0, 1], got {self.beta_floor}")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if self.teacher_count not in (1, 2):
            raise ValueError("teacher_count must be 1 or 2")
        if self.teacher_combination not in COMBINATIONS:
            raise ValueError(f"teacher_combination must be one of {COMBINATIONS}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}")

    @property
    def combination(self) -> str:
        """Resolved combination rule: mean-prob for reverse KL, mean-loss for forward."""
        if self.teacher_combination != "auto":
            return self.teacher_combination
        return "mean-prob" if self.objective == "reverse" else "mean-loss"


def beta_at_epoch(epoch: int, total_epochs: int, beta_start: float = 0.7, beta_floor: float = 0.1) -> float:
    """Linear decay from ``beta_start``, floored; the floor never lifts beta above its start."""
    if epoch < 0 or total_epochs < 1:
        raise ValueError("need epoch >= 0 and total_epochs >= 1")
    return max(min(beta_floor, beta_start), beta_start * (1.0 - epoch / total_epochs))


@dataclass(frozen=True)
class EpochState:
    epoch: int
    total_epochs: int

    def beta(self, cfg: DistillConfig) -> float:
        if not cfg.progressive:
            return cfg.beta_start
        return beta_at_epoch(self.epoch, self.total_epochs, cfg.beta_start, cfg.beta_floor)


@dataclass
class LossBreakdown:
    student_ce: float
    distillation: float
    total: float
    beta: float
    temperature: float
    loss: Optional[Tensor] = None  # graph root for backward


def mix_logits(z_teacher, z_student, beta: float) -> np.ndarray:
    """beta * z_teacher + (1 - beta) * z_student, returned as a constant array."""
    zt = _values(z_teacher)
    zs = _values(z_student)
    if zt.shape != zs.shape:
        raise ValueError(f"shape mismatch: {zt.shape} vs {zs.shape}")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if beta == 1.0:
        return zt.copy()
    if beta == 0.0:
        return zs.copy()
    return beta * zt + (1.0 - beta) * zs


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _reduce(per_pos: Tensor, reduction: str) -> Tensor:
    if reduction == "sum":
        return ad.sum(per_pos)
    if reduction == "mean":
        return ad.mean(per_pos)
    raise ValueError(f"unknown reduction {reduction!r}")


def _kl_loss(z_student: Tensor, z_target, T: float, reduction: str, reverse: bool) -> Tensor:
    z_student = z_student if isinstance(z_student, Tensor) else Tensor(z_student)
    per_pos = ad.kl_per_position(z_student, z_target, T, reverse=reverse)
    return ad.scale(_reduce(per_pos, reduction), T * T)


def reverse_kl_loss(z_student, z_mixed, T: float = 2.0, reduction: str = "mean") -> Tensor:
    """T^2 * KL(q || p) with q = softmax(z_student/T), p = softmax(z_mixed/T)."""
    return _kl_loss(z_student, z_mixed, T, reduction, reverse=True)


def forward_kl_loss(z_student, z_mixed, T: float = 2.0, reduction: str = "mean") -> Tensor:
    """T^2 * KL(p || q); same conventions as :func:`reverse_kl_loss`."""
    return _kl_loss(z_student, z_mixed, T, reduction, reverse=False)


def kl_loss(z_student, z_target, T: float, reduction: str, objective: str) -> Tensor:
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}")
    return _kl_loss(z_student, z_target, T, reduction, reverse=objective == "reverse")


def combine_teachers(teacher_logits: Sequence, mode: str) -> list[np.ndarray]:
    """Turn per-teacher logits into the list of targets the loss is averaged over.

    mean-prob collapses the teachers into one target whose distribution is the
    mean of their softmax distributions; mean-loss keeps one target per teacher.
    A single teacher passes through untouched in either mode.
    """
    if len(teacher_logits) == 0:
        raise ValueError("need at least one teacher")
    arrays = [_values(z) for z in teacher_logits]
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ValueError("teacher logits must share one shape")
    if len(arrays) == 1:
        return [arrays[0]]
    if mode == "mean-loss":
        return arrays
    if mode == "mean-prob":
        probs = np.mean([_kernels.softmax(a) for a in arrays], axis=0)
        return [np.log(np.maximum(probs, 1e-300))]
    raise ValueError(f"unknown teacher combination {mode!r}")


def segments(length: int, k: int) -> list[tuple[int, int]]:
    if k < 1:
        raise ValueError("chunk size must be >= 1")
    return [(s, min(s + k, length)) for s in range(0, length, k)]


def stepwise_loss(
    z_student: Tensor,
    z_target,
    T: float,
    k: int,
    reduction: str = "mean",
    objective: str = "reverse",
) -> Tensor:
    """KL loss evaluated over contiguous time segments of length ``k``.

    Segment sums are added, then divided by the total position count for
    mean reduction, so the value equals the unchunked loss.
    """
    z_student = z_student if isinstance(z_student, Tensor) else Tensor(z_student)
    zt = _values(z_target)
    if zt.shape != z_student.shape:
        raise ValueError(f"shape mismatch: {z_student.shape} vs {zt.shape}")
    if z_student.ndim != 3:
        raise ValueError("stepwise_loss expects (N, L, V) logits")
    length = z_student.shape[1]
    spans = segments(length, k)
    if len(spans) == 1:
        return kl_loss(z_student, zt, T, reduction, objective)
    total = None
    for a, b in spans:
        part = kl_loss(ad.getitem(z_student, (slice(None), slice(a, b))), zt[:, a:b], T, "sum", objective)
        total = part if total is None else total + part
    if reduction == "mean":
        n_pos = z_student.shape[0] * length
        return ad.scale(total, 1.0 / n_pos)
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return total


def total_loss(l_student, l_distillation, alpha: float) -> Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    ls = l_student if isinstance(l_student, Tensor) else Tensor(l_student)
    ld = l_distillation if isinstance(l_distillation, Tensor) else Tensor(l_distillation)
    return ad.scale(ls, alpha) + ad.scale(ld, 1.0 - alpha)


def distillation_from_logits(
    z_student: Tensor,
    teacher_logits: Sequence[np.ndarray],
    targets: np.ndarray,
    cfg: DistillConfig,
    beta: float,
    ignore_index: Optional[int] = 0,
) -> LossBreakdown:
    """Loss composition once the student and teacher logits are available."""
    t = cfg.temperature
    l_student = ad.cross_entropy(ad.log_softmax(z_student), targets, ignore_index=ignore_index)
    parts = []
    for zt in combine_teachers(teacher_logits, cfg.combination):
        z_mixed = mix_logits(zt, z_student, beta)
        if cfg.stepwise:
            parts.append(stepwise_loss(z_student, z_mixed, t, cfg.chunk_size, cfg.reduction, cfg.objective))
        else:
            parts.append(kl_loss(z_student, z_mixed, t, cfg.reduction, cfg.objective))
    l_distill = parts[0]
    for extra in parts[1:]:
        l_distill = l_distill + extra
    if len(parts) > 1:
        l_distill = ad.scale(l_distill, 1.0 / len(parts))
    loss = total_loss(l_student, l_distill, cfg.alpha)
    return LossBreakdown(
        student_ce=l_student.item(),
        distillation=l_distill.item(),
        total=loss.item(),
        beta=beta,
        temperature=t,
        loss=loss,
    )


def distillation_step(
    student: Weights,
    student_config: ModelConfig,
    teachers: Sequence[tuple[Weights, ModelConfig]],
    batch,
    cfg: DistillConfig,
    state: EpochState,
    teacher_logits: Optional[Sequence[np.ndarray]] = None,
) -> LossBreakdown:
    """Student forward, teacher forwards without graph, mixing, KL and CE.

    ``teacher_logits`` may supply precomputed teacher outputs for ``batch``.
    The returned breakdown carries ``loss``, ready for :func:`autodiff.backward`.
    """
    if len(teachers) != cfg.teacher_count:
        raise ValueError(f"expected {cfg.teacher_count} teacher(s), got {len(teachers)}")
    z_student = forward(student, batch.inputs, student_config)
    if teacher_logits is None:
        teacher_logits = [logits_no_grad(w, batch.inputs, c) for w, c in teachers]
    if any(z.shape != z_student.shape for z in teacher_logits):
        raise ValueError("teacher and student vocabularies differ")
    return distillation_from_logits(z_student, teacher_logits, batch.targets, cfg, state.beta(cfg))

