import numpy as np
import pytest

from revkd import autodiff as ad
from revkd.model import ModelConfig, count_params, forward, init_weights, logits_no_grad, param_shapes


def test_param_count_matches_shapes(tiny_config):
    c = tiny_config
    d, f, v = c.d_model, c.d_model * c.ffn_multiplier, c.vocab_size
    per_layer = 2 * d + 4 * d * d + 3 * d * f
    assert count_params(c) == v * d + c.max_seq_len * d + c.n_layers * per_layer + d + d * v
    weights = init_weights(c)
    assert [(k, t.shape) for k, t in weights.items()] == param_shapes(c)


def test_init_is_seeded(tiny_config):
    a = init_weights(tiny_config)
    b = init_weights(tiny_config)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert np.all(a["final_norm"].data == 1.0)


def test_forward_shape(tiny_config, rng):
    w = init_weights(tiny_config)
    tokens = rng.integers(0, tiny_config.vocab_size, size=(3, 5))
    assert forward(w, tokens, tiny_config).shape == (3, 5, tiny_config.vocab_size)


def test_forward_is_causal(tiny_config, rng):
    w = init_weights(tiny_config)
    tokens = rng.integers(0, tiny_config.vocab_size, size=(1, 6))
    changed = tokens.copy()
    changed[0, 4] = (changed[0, 4] + 1) % tiny_config.vocab_size
    a = logits_no_grad(w, tokens, tiny_config)
    b = logits_no_grad(w, changed, tiny_config)
    np.testing.assert_array_equal(a[0, :4], b[0, :4])
    assert not np.allclose(a[0, 4:], b[0, 4:])


def test_forward_rejects_bad_input(tiny_config):
    w = init_weights(tiny_config)
    with pytest.raises(ValueError, match="max_seq_len"):
        forward(w, np.zeros((1, 7), dtype=int), tiny_config)
    with pytest.raises(ValueError, match="out of range"):
        forward(w, np.full((1, 2), 7), tiny_config)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=5, max_seq_len=4, d_model=6, n_heads=4, n_layers=1).validate()
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=0, max_seq_len=4, d_model=4, n_heads=2, n_layers=1).validate()


def test_model_gradient_matches_finite_differences(tiny_config, rng):
    w = init_weights(tiny_config)
    tokens = rng.integers(0, tiny_config.vocab_size, size=(2, 4))
    targets = rng.integers(0, tiny_config.vocab_size, size=(2, 4))
    for name in ("tok_embedding", "layers.0.wq", "layers.0.w_gate", "layers.0.attn_norm", "output"):
        def f(t, name=name):
            local = dict(w)
            local[name] = t
            return ad.cross_entropy(ad.log_softmax(forward(local, tokens, tiny_config)), targets)
        assert ad.finite_difference_check(f, w[name].data) < 1e-6, name
