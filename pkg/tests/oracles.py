"""Slow, obviously-correct reference computations used only by the tests."""

import math

import numpy as np


def tempered_probs(z, T):
    """Plain-python softmax(z / T) over one row."""
    m = max(z)
    e = [math.exp((x - m) / T) for x in z]
    s = sum(e)
    return [x / s for x in e]


def kl_sum(p, q, floor=1e-12):
    """sum_v p_v (log p_v - log q_v), with log arguments floored like the library."""
    return sum(pv * (math.log(max(pv, floor)) - math.log(max(qv, floor))) for pv, qv in zip(p, q))


def per_position_kl(z_student, z_target, T, reverse=True):
    """Vocabulary-sum KL for every position of (..., V) arrays."""
    zs = np.asarray(z_student, dtype=float).reshape(-1, np.shape(z_student)[-1])
    zt = np.asarray(z_target, dtype=float).reshape(zs.shape)
    out = []
    for a, b in zip(zs, zt):
        q = tempered_probs(list(a), T)
        p = tempered_probs(list(b), T)
        out.append(kl_sum(q, p) if reverse else kl_sum(p, q))
    return np.array(out).reshape(np.shape(z_student)[:-1])


def adamw_hand(w, g, lr, beta1, beta2, eps, wd, t=1, m=0.0, v=0.0):
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g * g
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    return w - lr * m_hat / (math.sqrt(v_hat) + eps) - lr * wd * w


def beta_hand(epoch, total, start=0.7, floor=0.1):
    return max(floor, start * (1 - epoch / total))
