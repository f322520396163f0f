"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When any input requires a gradient
and recording is enabled, the output keeps a reference to its parents and a
closure that maps the output gradient to input gradients. Node ids grow
monotonically, so visiting nodes by descending id is a valid reverse
topological order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from revkd import _kernels

_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (teacher forward passes, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        raise TypeError("only division by a scalar is supported")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _not_scalar(t: Tensor):
    raise ValueError(f"expected a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.node_id = next(_ids)
    out._consumed = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = None
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 1.0 / (1.0 + np.exp(-x))
    return _make(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul operands need at least 2 dimensions")

    if bd.ndim == 2:
        # one large GEMM instead of a batch of small ones
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), backward)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, idx) -> Tensor:
    src = a.shape

    def backward(g):
        out = np.zeros(src)
        out[idx] = g
        return (out,)

    return _make(np.array(a.data[idx]), (a,), backward)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# network ops
# ---------------------------------------------------------------------------

def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    n_rows = weight.shape[0]
    return _make(
        weight.data[ids],
        (weight,),
        lambda g: (_kernels.embedding_backward(ids, g, n_rows),),
    )


def rms_norm(x: Tensor, weight: Tensor, eps: float) -> Tensor:
    xd, wd = x.data, weight.data
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * r

    def backward(g):
        gw = (g * xhat).reshape(-1, wd.shape[0]).sum(axis=0)
        gx_hat = g * wd
        d = xd.shape[-1]
        gx = r * (gx_hat - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, gw

    return _make(xhat * wd, (x, weight), backward)


def _check_temperature(logits: Tensor, T: float) -> None:
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    if logits.ndim == 0 or logits.shape[-1] == 0:
        raise ValueError("softmax needs a non-empty last axis")


def softmax(logits: Tensor, T: float = 1.0) -> Tensor:
    """softmax(logits / T) over the last axis."""
    logits = _as_tensor(logits)
    _check_temperature(logits, T)
    y = _kernels.softmax(logits.data, 1.0 / T)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)) / T,)

    return _make(y, (logits,), backward)


def log_softmax(logits: Tensor, T: float = 1.0) -> Tensor:
    """log(softmax(logits / T)) over the last axis."""
    logits = _as_tensor(logits)
    _check_temperature(logits, T)
    out = _kernels.log_softmax(logits.data, 1.0 / T)

    def backward(g):
        return ((g - np.exp(out) * g.sum(axis=-1, keepdims=True)) / T,)

    return _make(out, (logits,), backward)


softmax_with_temperature = softmax
log_softmax_with_temperature = log_softmax


def cross_entropy(log_probs: Tensor, targets: np.ndarray, ignore_index: Optional[int] = None) -> Tensor:
    """Mean of ``-log_probs[..., target]`` over positions not equal to ``ignore_index``."""
    targets = np.asarray(targets)
    if targets.shape != log_probs.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match {log_probs.shape[:-1]}")
    v = log_probs.shape[-1]
    keep = np.ones(targets.shape, dtype=bool) if ignore_index is None else targets != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise ValueError("every position is ignored")
    kept = targets[keep]
    if kept.min() < 0 or kept.max() >= v:
        raise ValueError(f"target out of range [0, {v})")
    flat_lp = log_probs.data.reshape(-1, v)
    rows = np.flatnonzero(keep.reshape(-1))
    cols = targets.reshape(-1)[rows]
    value = -flat_lp[rows, cols].sum() / count

    def backward(g):
        out = np.zeros_like(flat_lp)
        out[rows, cols] = -float(g) / count
        return (out.reshape(log_probs.shape),)

    return _make(np.asarray(value), (log_probs,), backward)


def kl_per_position(z_student: Tensor, z_target, T: float, reverse: bool = True) -> Tensor:
    """Per-position KL between tempered categorical distributions.

    reverse=True gives KL(q || p) with q = softmax(z_student/T), p = softmax(z_target/T);
    reverse=False gives KL(p || q). Log-probabilities are floored at log(1e-12).
    ``z_target`` is a constant: no gradient reaches it.
    """
    zt = z_target.data if isinstance(z_target, Tensor) else np.asarray(z_target, dtype=np.float64)
    if zt.shape != z_student.shape:
        raise ValueError(f"shape mismatch: {z_student.shape} vs {zt.shape}")
    _check_temperature(z_student, T)
    kl, dkl = _kernels.kl_rows(z_student.data, zt, 1.0 / T, reverse)
    return _make(kl, (z_student,), lambda g: (g[..., None] * dkl,))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _graph(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if t.node_id in seen or not t.requires_grad:
            continue
        seen.add(t.node_id)
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t.node_id, reverse=True)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    A graph can be differentiated once; intermediate buffers are released.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward already ran on this graph; rebuild it before differentiating again")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    nodes = _graph(loss)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in nodes:
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg
    for node in nodes:
        node._consumed = True
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
    loss._consumed = True


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray,
    h: float = 1e-5,
    floor: float = 1e-3,
) -> float:
    """Max relative error between the analytic gradient and central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps near-zero entries from turning round-off into huge ratios.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    leaf = Tensor(x, requires_grad=True)
    backward(f(leaf))
    analytic = leaf.grad
    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(x)).item()
            flat[i] = orig - h
            fm = f(Tensor(x)).item()
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())
