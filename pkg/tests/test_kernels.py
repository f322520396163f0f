import numpy as np
import pytest

from revkd import _kernels

pytestmark = pytest.mark.skipif(_kernels.numba_impl is None, reason="numba not installed")


@pytest.fixture
def logits(rng):
    return rng.normal(scale=3.0, size=(17, 11))


def test_log_softmax_paths_agree(logits):
    a = _kernels.numpy_impl.log_softmax_rows(logits, 0.5)
    b = _kernels.numba_impl.log_softmax_rows(logits, 0.5)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-13)


def test_softmax_paths_agree(logits):
    a = _kernels.numpy_impl.softmax_rows(logits, 1.3)
    b = _kernels.numba_impl.softmax_rows(logits, 1.3)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)


@pytest.mark.parametrize("kind", ["reverse_kl_rows", "forward_kl_rows"])
def test_kl_paths_agree(kind, logits, rng):
    target = rng.normal(scale=3.0, size=logits.shape)
    ka, ga = getattr(_kernels.numpy_impl, kind)(logits, target, 0.5)
    kb, gb = getattr(_kernels.numba_impl, kind)(logits, target, 0.5)
    np.testing.assert_allclose(ka, kb, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(ga, gb, rtol=1e-10, atol=1e-14)


def test_kl_paths_agree_when_clamped():
    # a near-one-hot target pushes log-probabilities below the clamp
    zs = np.array([[0.0, 0.0, 0.0], [50.0, -50.0, 0.0]])
    zt = np.array([[80.0, -80.0, 0.0], [0.0, 0.0, 0.0]])
    for kind in ("reverse_kl_rows", "forward_kl_rows"):
        ka, ga = getattr(_kernels.numpy_impl, kind)(zs, zt, 1.0)
        kb, gb = getattr(_kernels.numba_impl, kind)(zs, zt, 1.0)
        np.testing.assert_allclose(ka, kb, rtol=1e-12)
        np.testing.assert_allclose(ga, gb, rtol=1e-10, atol=1e-14)


def test_embedding_backward_paths_agree(rng):
    ids = rng.integers(0, 6, size=40)
    grad = rng.normal(size=(40, 3))
    a = _kernels.numpy_impl.embedding_backward(ids, grad, 6)
    b = _kernels.numba_impl.embedding_backward(ids, grad, 6)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-13)


def test_wrappers_accept_nd_input(rng):
    x = rng.normal(size=(2, 3, 5))
    out = _kernels.softmax(x)
    assert out.shape == x.shape
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-15)


def test_active_path_has_a_name():
    assert _kernels.active.name in ("numba", "numpy")


@pytest.mark.parametrize("flag,expected", [("0", "numpy"), ("1", "numba")])
def test_environment_flag_selects_path(flag, expected):
    import os
    import subprocess
    import sys

    code = "from revkd import _kernels; print(_kernels.active.name)"
    env = {**os.environ, "REVKD_NUMBA": flag}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected


def test_numpy_path_trains_like_numba_path(monkeypatch, rng):
    from revkd import autodiff as ad
    from revkd.model import ModelConfig, forward, init_weights

    cfg = ModelConfig(vocab_size=9, max_seq_len=6, d_model=8, n_heads=2, n_layers=1, seed=5)
    tokens = rng.integers(0, 9, size=(2, 6))
    grads = {}
    for name, impl in (("numpy", _kernels.numpy_impl), ("numba", _kernels.numba_impl)):
        monkeypatch.setattr(_kernels, "active", impl)
        w = init_weights(cfg)
        ad.backward(ad.cross_entropy(ad.log_softmax(forward(w, tokens, cfg)), tokens))
        grads[name] = w
    for k in grads["numpy"]:
        np.testing.assert_allclose(grads["numpy"][k].grad, grads["numba"][k].grad, rtol=1e-10, atol=1e-13)
