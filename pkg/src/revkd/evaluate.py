"""Sequence scoring, perplexity, minimal-pair accuracy, mode mass and exact
enumeration oracles for tiny models.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from collections import defaultdict
from typing import Optional, Sequence

import numpy as np

from revkd import _kernels
from revkd.data import PAD_ID, SEP_ID, Corpus, MinimalPair
from revkd.model import ModelConfig, Weights, logits_no_grad

METRIC_COLUMNS = (
    "run_id", "epoch", "step", "loss_total", "loss_ce", "loss_distill", "beta", "lr",
    "perplexity", "mp_accuracy", "mode_mass_m1", "mode_mass_m5",
)
MAX_ENUMERATION = 65536


def _check_tokens(tokens: np.ndarray, config: ModelConfig) -> None:
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ValueError(f"token id out of range [0, {config.vocab_size})")


def sequence_logprobs(weights: Weights, config: ModelConfig, seqs: np.ndarray, bos: int = SEP_ID) -> np.ndarray:
    """Natural-log probability of each row of ``seqs`` given a leading ``bos`` token."""
    seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
    _check_tokens(seqs, config)
    if seqs.shape[1] == 0:
        return np.zeros(seqs.shape[0])
    inputs = np.concatenate([np.full((seqs.shape[0], 1), bos, dtype=np.int64), seqs[:, :-1]], axis=1)
    logp = _kernels.log_softmax(logits_no_grad(weights, inputs, config))
    picked = np.take_along_axis(logp, seqs[..., None], axis=-1)[..., 0]
    return picked.sum(axis=1)


def sequence_logprob(weights: Weights, config: ModelConfig, tokens: Sequence[int], bos: int = SEP_ID) -> float:
    return float(sequence_logprobs(weights, config, np.asarray([tokens]), bos)[0])


def perplexity(weights: Weights, config: ModelConfig, corpus, seq_len: int) -> float:
    """exp(mean next-token NLL) over non-overlapping windows of ``seq_len + 1`` tokens."""
    tokens = corpus.tokens if isinstance(corpus, Corpus) else np.asarray(corpus, dtype=np.int64)
    if tokens.size < 2:
        raise ValueError("corpus is empty")
    _check_tokens(tokens, config)
    width = seq_len + 1
    total, count = 0.0, 0
    starts = list(range(0, tokens.size - 1, width))
    full = [s for s in starts if s + width <= tokens.size]
    chunks = []
    if full:
        chunks.append(np.stack([tokens[s:s + width] for s in full]))
    tail = [s for s in starts if s + width > tokens.size]
    for s in tail:
        chunks.append(tokens[s:][None, :])
    for block in chunks:
        for i in range(0, block.shape[0], 64):
            w = block[i:i + 64]
            logp = _kernels.log_softmax(logits_no_grad(weights, w[:, :-1], config))
            tgt = w[:, 1:]
            nll = -np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
            keep = tgt != PAD_ID
            total += float(nll[keep].sum())
            count += int(keep.sum())
    if count == 0:
        raise ValueError("corpus has no scoreable tokens")
    return math.exp(total / count)


def minimal_pair_accuracy(weights: Weights, config: ModelConfig, pairs: Sequence[MinimalPair]) -> float:
    """Share of pairs where the grammatical member scores higher; exact ties count 0.5."""
    if not pairs:
        raise ValueError("no minimal pairs")
    by_len: dict[int, list[int]] = defaultdict(list)
    for i, p in enumerate(pairs):
        if len(p.good) != len(p.bad):
            raise ValueError("minimal pair members must have equal length")
        by_len[len(p.good)].append(i)
    score = 0.0
    for length, idx in sorted(by_len.items()):
        good = np.asarray([pairs[i].good for i in idx])
        bad = np.asarray([pairs[i].bad for i in idx])
        lg = sequence_logprobs(weights, config, good)
        lb = sequence_logprobs(weights, config, bad)
        score += float((lg > lb).sum()) + 0.5 * float((lg == lb).sum())
    return score / len(pairs)


def mode_mass_from_probs(student_probs: np.ndarray, teacher_probs: np.ndarray, m: int) -> float:
    """Mean student probability on the teacher's top-``m`` outcomes, per row."""
    v = teacher_probs.shape[-1]
    if not 1 <= m <= v:
        raise ValueError(f"m must lie in [1, {v}], got {m}")
    sp = student_probs.reshape(-1, v)
    tp = teacher_probs.reshape(-1, v)
    top = np.argsort(-tp, axis=1, kind="stable")[:, :m]
    return float(np.take_along_axis(sp, top, axis=1).sum(axis=1).mean())


def mode_mass(
    student: Weights,
    student_config: ModelConfig,
    teacher: Weights,
    teacher_config: ModelConfig,
    contexts: np.ndarray,
    m: int,
) -> float:
    """Next-token mass the student puts on the teacher's top-``m`` tokens, averaged
    over every position of every context row."""
    if student_config.vocab_size != teacher_config.vocab_size:
        raise ValueError("student and teacher must share one vocabulary")
    if m > student_config.vocab_size:
        raise ValueError(f"m={m} exceeds vocabulary size {student_config.vocab_size}")
    contexts = np.atleast_2d(contexts)
    sp = _kernels.softmax(logits_no_grad(student, contexts, student_config))
    tp = _kernels.softmax(logits_no_grad(teacher, contexts, teacher_config))
    return mode_mass_from_probs(sp, tp, m)


def enumerate_sequences(vocab_size: int, length: int) -> np.ndarray:
    if vocab_size ** length > MAX_ENUMERATION:
        raise ValueError(f"{vocab_size}^{length} sequences exceed the enumeration guard ({MAX_ENUMERATION})")
    return np.asarray(list(itertools.product(range(vocab_size), repeat=length)), dtype=np.int64).reshape(-1, length)


def sequence_distribution(weights: Weights, config: ModelConfig, length: int, bos: int = SEP_ID) -> np.ndarray:
    """Log-probabilities of all V^length sequences, in lexicographic order."""
    seqs = enumerate_sequences(config.vocab_size, length)
    out = np.empty(seqs.shape[0])
    for i in range(0, seqs.shape[0], 4096):
        out[i:i + 4096] = sequence_logprobs(weights, config, seqs[i:i + 4096], bos)
    return out


def exact_sequence_kl(
    weights_a: Weights,
    config_a: ModelConfig,
    weights_b: Weights,
    config_b: ModelConfig,
    length: int,
) -> float:
    """KL(a || b) between the two models' distributions over all length-``length`` sequences."""
    if config_a.vocab_size != config_b.vocab_size:
        raise ValueError("models must share one vocabulary")
    la = sequence_distribution(weights_a, config_a, length)
    lb = sequence_distribution(weights_b, config_b, length)
    return float(max(0.0, np.sum(np.exp(la) * (la - lb))))


def default_contexts(corpus, n_rows: int = 8, width: int = 32) -> np.ndarray:
    """First ``n_rows`` windows of a held-out corpus: 256 positions by default."""
    tokens = corpus.tokens if isinstance(corpus, Corpus) else np.asarray(corpus)
    if tokens.size < n_rows * width:
        raise ValueError("held-out corpus too small for the context set")
    return tokens[: n_rows * width].reshape(n_rows, width)


# ---------------------------------------------------------------------------
# metric files
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])
    return buf.getvalue()


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def metric_rows(run_id: str, steps: Sequence[dict], epochs: Sequence[dict]) -> list[dict]:
    """Merge per-step loss rows and per-epoch evaluation rows, ordered by step."""
    rows = [{"run_id": run_id, **s} for s in steps]
    rows += [{"run_id": run_id, **e} for e in epochs]
    rows.sort(key=lambda r: (r["step"], "perplexity" in r))
    return rows


class Evaluator:
    """Fixed evaluation set: held-out corpus, minimal pairs and mode-mass contexts."""

    def __init__(
        self,
        eval_corpus: Corpus,
        pairs: Sequence[MinimalPair],
        seq_len: int,
        teacher: Optional[tuple[Weights, ModelConfig]] = None,
        contexts: Optional[np.ndarray] = None,
    ):
        self.eval_corpus = eval_corpus
        self.pairs = list(pairs)
        self.seq_len = seq_len
        self.teacher = teacher
        self.contexts = default_contexts(eval_corpus) if contexts is None else contexts

    def metrics(self, weights: Weights, config: ModelConfig) -> dict:
        out = {
            "perplexity": perplexity(weights, config, self.eval_corpus, self.seq_len),
            "mp_accuracy": minimal_pair_accuracy(weights, config, self.pairs),
            "mode_mass_m1": None,
            "mode_mass_m5": None,
        }
        if self.teacher is not None:
            tw, tc = self.teacher
            out["mode_mass_m1"] = mode_mass(weights, config, tw, tc, self.contexts, 1)
            out["mode_mass_m5"] = mode_mass(weights, config, tw, tc, self.contexts, 5)
        return out

    def callback(self, config: ModelConfig):
        return lambda weights, epoch, step: self.metrics(weights, config)
