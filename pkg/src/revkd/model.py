"""Toy decoder-only transformer used as both teacher and student.

Pre-norm blocks with RMS normalization, causal multi-head attention, a gated
SiLU feed-forward and learned position embeddings. Teacher and student differ
only in their :class:`ModelConfig`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from revkd import autodiff as ad
from revkd.autodiff import Tensor

Weights = dict  # parameter path -> Tensor, in canonical order


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_seq_len: int
    d_model: int
    n_heads: int
    n_layers: int
    ffn_multiplier: int = 4
    norm_eps: float = 1e-5
    seed: int = 0

    def validate(self) -> None:
        for name in ("vocab_size", "max_seq_len", "d_model", "n_heads", "n_layers", "ffn_multiplier"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not self.norm_eps > 0:
            raise ValueError("norm_eps must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (path, shape) list; the single source of truth for the layout."""
    d, v, f = config.d_model, config.vocab_size, config.d_model * config.ffn_multiplier
    shapes = [("tok_embedding", (v, d)), ("pos_embedding", (config.max_seq_len, d))]
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes += [
            (p + "attn_norm", (d,)),
            (p + "wq", (d, d)),
            (p + "wk", (d, d)),
            (p + "wv", (d, d)),
            (p + "wo", (d, d)),
            (p + "ffn_norm", (d,)),
            (p + "w_gate", (d, f)),
            (p + "w_up", (d, f)),
            (p + "w_down", (f, d)),
        ]
    shapes += [("final_norm", (d,)), ("output", (d, v))]
    return shapes


def count_params(config: ModelConfig) -> int:
    return sum(math.prod(shape) for _, shape in param_shapes(config))


def init_weights(config: ModelConfig, requires_grad: bool = True) -> Weights:
    config.validate()
    rng = np.random.default_rng(config.seed)
    std = 1.0 / math.sqrt(config.d_model)
    weights = {}
    for name, shape in param_shapes(config):
        if name.endswith("norm"):
            data = np.ones(shape)
        else:
            data = rng.normal(0.0, std, size=shape)
        weights[name] = Tensor(data, requires_grad=requires_grad)
    return weights


def _causal_mask(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), -np.inf), k=1)


def _attention(x: Tensor, w: Weights, p: str, n_heads: int) -> Tensor:
    n, length, d = x.shape
    dh = d // n_heads

    def heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (n, length, n_heads, dh)), (0, 2, 1, 3))

    q = heads(x @ w[p + "wq"])
    k = heads(x @ w[p + "wk"])
    v = heads(x @ w[p + "wv"])
    scores = ad.scale(q @ ad.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh))
    attn = ad.softmax(scores + _causal_mask(length))
    out = ad.reshape(ad.transpose(attn @ v, (0, 2, 1, 3)), (n, length, d))
    return out @ w[p + "wo"]


def _feed_forward(x: Tensor, w: Weights, p: str) -> Tensor:
    return ad.mul(ad.silu(x @ w[p + "w_gate"]), x @ w[p + "w_up"]) @ w[p + "w_down"]


def forward(weights: Weights, tokens, config: ModelConfig) -> Tensor:
    """Next-token logits of shape (N, L, V) for integer ``tokens`` of shape (N, L)."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be 2-D, got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ValueError("tokens must be integers")
    length = tokens.shape[1]
    if length > config.max_seq_len:
        raise ValueError(f"sequence length {length} exceeds max_seq_len={config.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ValueError(f"token id out of range [0, {config.vocab_size})")

    x = ad.embedding(weights["tok_embedding"], tokens)
    x = x + ad.getitem(weights["pos_embedding"], slice(0, length))
    eps = config.norm_eps
    for i in range(config.n_layers):
        p = f"layers.{i}."
        x = x + _attention(ad.rms_norm(x, weights[p + "attn_norm"], eps), weights, p, config.n_heads)
        x = x + _feed_forward(ad.rms_norm(x, weights[p + "ffn_norm"], eps), weights, p)
    x = ad.rms_norm(x, weights["final_norm"], eps)
    return x @ weights["output"]


def logits_no_grad(weights: Weights, tokens, config: ModelConfig) -> np.ndarray:
    with ad.no_grad():
        return forward(weights, tokens, config).data


def clone_weights(weights: Weights, requires_grad: bool = False) -> Weights:
    return {k: Tensor(t.data.copy(), requires_grad=requires_grad) for k, t in weights.items()}
