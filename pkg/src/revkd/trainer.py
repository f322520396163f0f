"""AdamW, cosine annealing and the epoch/batch training loops for teachers and students."""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from revkd import autodiff as ad
from revkd.checkpoint import load_checkpoint, save_checkpoint
from revkd.data import PAD_ID, Batch, corpus_windows, make_batches
from revkd.distill import DistillConfig, EpochState, LossBreakdown, distillation_step
from revkd.model import ModelConfig, Weights, forward, init_weights, logits_no_grad

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t_max: int = 500
    lr_min: float = 0.0

    def validate(self) -> None:
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not self.lr > 0 or self.lr_min < 0 or self.lr_min > self.lr:
            raise ValueError("need 0 <= lr_min <= lr and lr > 0")
        if self.t_max < 1:
            raise ValueError("t_max must be positive")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    seq_len: int = 128
    epochs: int = 6
    grad_accum: int = 1
    seed: int = 0
    checkpoint_every: int = 0

    def validate(self) -> None:
        for name in ("batch_size", "seq_len", "grad_accum"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.seed < 0 or self.checkpoint_every < 0:
            raise ValueError("epochs, seed and checkpoint_every must be non-negative")


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def cosine_lr(step: int, cfg: OptimizerConfig) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    frac = min(step, cfg.t_max) / cfg.t_max
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + math.cos(math.pi * frac))


def adamw_step(
    weights: Weights,
    state: OptimizerState,
    cfg: OptimizerConfig,
    lr: float,
    grads: Optional[dict] = None,
) -> None:
    """One AdamW update with bias correction and decoupled weight decay, in place."""
    if not lr > 0:
        raise ValueError("lr must be positive")
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, w in weights.items():
        g = w.grad if grads is None else grads[name]
        if g is None:
            g = np.zeros_like(w.data)
        if g.shape != w.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {w.data.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(w.data)
            v = np.zeros_like(w.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        w.data = w.data - lr * update - lr * cfg.weight_decay * w.data
    state.step = t


@dataclass
class TrainReport:
    weights: Weights
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    @property
    def loss_curve(self) -> list[float]:
        return [row["loss_total"] for row in self.steps]


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _zero_grads(weights: Weights) -> None:
    for w in weights.values():
        w.zero_grad()


def _optimize(
    weights: Weights,
    corpus,
    loss_fn: Callable[[Batch, int], LossBreakdown],
    train_cfg: TrainConfig,
    optim_cfg: OptimizerConfig,
    evaluate: Optional[Callable[[Weights, int, int], dict]] = None,
    checkpoint: Optional[Callable[[Weights, int], None]] = None,
) -> TrainReport:
    train_cfg.validate()
    optim_cfg.validate()
    report = TrainReport(weights)
    state = OptimizerState()
    start = time.perf_counter()
    g_steps = train_cfg.grad_accum
    if evaluate is not None:
        report.epochs.append({"epoch": 0, "step": 0, **evaluate(weights, 0, 0)})
    for epoch in range(train_cfg.epochs):
        batches = make_batches(corpus, train_cfg.batch_size, train_cfg.seq_len, epoch_seed(train_cfg.seed, epoch))
        for k in range(len(batches) // g_steps):
            _zero_grads(weights)
            sums = {"loss_total": 0.0, "loss_ce": 0.0, "loss_distill": 0.0}
            beta = 0.0
            for batch in batches[k * g_steps:(k + 1) * g_steps]:
                bd = loss_fn(batch, epoch)
                if not all(math.isfinite(x) for x in (bd.total, bd.student_ce, bd.distillation)):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch + 1}, step {state.step}: "
                        f"total={bd.total} ce={bd.student_ce} distill={bd.distillation}"
                    )
                loss = bd.loss if g_steps == 1 else ad.scale(bd.loss, 1.0 / g_steps)
                ad.backward(loss)
                sums["loss_total"] += bd.total / g_steps
                sums["loss_ce"] += bd.student_ce / g_steps
                sums["loss_distill"] += bd.distillation / g_steps
                beta = bd.beta
            lr = cosine_lr(state.step, optim_cfg)
            adamw_step(weights, state, optim_cfg, lr)
            report.steps.append({"epoch": epoch + 1, "step": state.step, **sums, "beta": beta, "lr": lr})
            if checkpoint is not None and train_cfg.checkpoint_every and state.step % train_cfg.checkpoint_every == 0:
                checkpoint(weights, state.step)
        if evaluate is not None:
            report.epochs.append({"epoch": epoch + 1, "step": state.step, **evaluate(weights, epoch + 1, state.step)})
        if report.steps:
            log.info("epoch %d/%d  step %d  loss %.4f", epoch + 1, train_cfg.epochs, state.step,
                     report.steps[-1]["loss_total"])
    _zero_grads(weights)
    report.wall_time = time.perf_counter() - start
    return report


def train_teacher(
    config: ModelConfig,
    train_cfg: TrainConfig,
    optim_cfg: OptimizerConfig,
    corpus,
    evaluate: Optional[Callable[[Weights, int, int], dict]] = None,
    checkpoint_path: Optional[str | os.PathLike] = None,
) -> TrainReport:
    """Plain next-token cross-entropy training from a fresh initialization."""
    weights = init_weights(config)

    def loss_fn(batch: Batch, epoch: int) -> LossBreakdown:
        logits = forward(weights, batch.inputs, config)
        ce = ad.cross_entropy(ad.log_softmax(logits), batch.targets, ignore_index=PAD_ID)
        v = ce.item()
        return LossBreakdown(student_ce=v, distillation=0.0, total=v, beta=0.0, temperature=1.0, loss=ce)

    report = _optimize(weights, corpus, loss_fn, train_cfg, optim_cfg, evaluate, _saver(config, checkpoint_path))
    if checkpoint_path is not None:
        save_checkpoint(weights, config, checkpoint_path)
    return report


def _saver(config: ModelConfig, path):
    if path is None:
        return None
    path = Path(path)

    def save(weights: Weights, step: int) -> None:
        save_checkpoint(weights, config, path.with_name(f"{path.stem}.step{step}{path.suffix}"))

    return save


def _resolve_teachers(teachers: Sequence) -> list[tuple[Weights, ModelConfig]]:
    out = []
    for t in teachers:
        if isinstance(t, (str, os.PathLike)):
            out.append(load_checkpoint(t))
        else:
            w, c = t
            out.append((w, c))
    return out


def _window_logits(weights: Weights, config: ModelConfig, corpus, seq_len: int, chunk: int = 32) -> np.ndarray:
    windows = corpus_windows(corpus, seq_len)[:, :-1]
    out = np.empty(windows.shape + (config.vocab_size,))
    for i in range(0, windows.shape[0], chunk):
        out[i:i + chunk] = logits_no_grad(weights, windows[i:i + chunk], config)
    return out


def run_distillation(
    student_config: ModelConfig,
    teachers: Sequence,
    distill_cfg: DistillConfig,
    train_cfg: TrainConfig,
    optim_cfg: OptimizerConfig,
    corpus,
    evaluate: Optional[Callable[[Weights, int, int], dict]] = None,
    checkpoint_path: Optional[str | os.PathLike] = None,
    cache_teacher_logits: bool = True,
) -> TrainReport:
    """Distil ``teachers`` (checkpoint paths or (weights, config) pairs) into a fresh student.

    With ``cache_teacher_logits`` the frozen teachers run once per corpus
    window instead of once per step; epochs only reorder the windows.
    """
    distill_cfg.validate()
    if len(corpus) == 0:
        raise ValueError("dataset is empty")
    resolved = _resolve_teachers(teachers)
    if len(resolved) != distill_cfg.teacher_count:
        raise ValueError(f"expected {distill_cfg.teacher_count} teacher(s), got {len(resolved)}")
    for _, c in resolved:
        if c.vocab_size != student_config.vocab_size:
            raise ValueError("teacher and student must share one vocabulary")
    student = init_weights(student_config)
    cache = None
    if cache_teacher_logits and train_cfg.epochs > 0:
        cache = [_window_logits(w, c, corpus, train_cfg.seq_len) for w, c in resolved]

    def loss_fn(batch: Batch, epoch: int) -> LossBreakdown:
        state = EpochState(epoch, train_cfg.epochs)
        cached = None if cache is None else [z[batch.windows] for z in cache]
        return distillation_step(student, student_config, resolved, batch, distill_cfg, state, cached)

    report = _optimize(student, corpus, loss_fn, train_cfg, optim_cfg, evaluate,
                       _saver(student_config, checkpoint_path))
    if checkpoint_path is not None:
        save_checkpoint(student, student_config, checkpoint_path)
    return report
