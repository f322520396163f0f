import numpy as np
import pytest

from revkd import autodiff as ad
from revkd.autodiff import Tensor
from revkd.data import Batch
from revkd.distill import (
    DistillConfig,
    EpochState,
    beta_at_epoch,
    combine_teachers,
    distillation_from_logits,
    distillation_step,
    forward_kl_loss,
    kl_loss,
    mix_logits,
    reverse_kl_loss,
    segments,
    stepwise_loss,
    total_loss,
)
from revkd.model import ModelConfig, init_weights

from oracles import per_position_kl


def test_reverse_kl_matches_oracle(rng):
    zs, zt = rng.normal(size=(2, 3, 6)), rng.normal(size=(2, 3, 6))
    got = reverse_kl_loss(zs, zt, T=2.0, reduction="sum").item()
    assert got == pytest.approx(4.0 * per_position_kl(zs, zt, 2.0).sum(), abs=1e-12)


def test_forward_kl_matches_oracle(rng):
    zs, zt = rng.normal(size=(2, 3, 6)), rng.normal(size=(2, 3, 6))
    got = forward_kl_loss(zs, zt, T=1.5, reduction="mean").item()
    assert got == pytest.approx(2.25 * per_position_kl(zs, zt, 1.5, reverse=False).mean(), abs=1e-12)


def test_kl_objectives_differ(rng):
    zs, zt = rng.normal(size=(1, 4, 5)), rng.normal(size=(1, 4, 5))
    assert reverse_kl_loss(zs, zt).item() != pytest.approx(forward_kl_loss(zs, zt).item(), abs=1e-6)


def test_kl_loss_rejects_bad_arguments(rng):
    z = rng.normal(size=(1, 2, 3))
    with pytest.raises(ValueError):
        kl_loss(z, z, 1.0, "mean", "sideways")
    with pytest.raises(ValueError):
        reverse_kl_loss(z, z[:, :1])
    with pytest.raises(ValueError):
        reverse_kl_loss(z, z, reduction="median")
    with pytest.raises(ValueError):
        reverse_kl_loss(z, z, T=0.0)


def test_target_receives_no_gradient(rng):
    zs = Tensor(rng.normal(size=(1, 2, 4)), requires_grad=True)
    zt = Tensor(rng.normal(size=(1, 2, 4)), requires_grad=True)
    ad.backward(reverse_kl_loss(zs, zt))
    assert np.all(zt.grad == 0)
    assert np.any(zs.grad != 0)


def test_mixing_endpoints_and_midpoint(rng):
    zt, zs = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    assert mix_logits(zt, zs, 1.0).tobytes() == zt.tobytes()
    assert mix_logits(zt, zs, 0.0).tobytes() == zs.tobytes()
    np.testing.assert_allclose(mix_logits(zt, zs, 0.25), 0.25 * zt + 0.75 * zs, rtol=0, atol=0)
    with pytest.raises(ValueError):
        mix_logits(zt, zs, 1.5)


def test_beta_schedule():
    assert beta_at_epoch(0, 6) == 0.7
    assert beta_at_epoch(6, 6) == 0.1
    assert beta_at_epoch(3, 6) == pytest.approx(0.35, abs=1e-15)
    assert EpochState(5, 6).beta(DistillConfig(progressive=False)) == 0.7
    assert EpochState(2, 6).beta(DistillConfig(beta_start=0.0, beta_floor=0.0)) == 0.0
    assert [EpochState(e, 6).beta(DistillConfig(beta_start=0.0)) for e in range(6)] == [0.0] * 6
    with pytest.raises(ValueError):
        beta_at_epoch(-1, 6)


def test_config_validation():
    DistillConfig().validate()
    for bad in (dict(objective="js"), dict(temperature=0.0), dict(alpha=1.5), dict(beta_start=1.2),
                dict(beta_floor=-0.1), dict(chunk_size=0), dict(teacher_count=3),
                dict(teacher_combination="max"), dict(reduction="median")):
        with pytest.raises(ValueError):
            DistillConfig(**bad).validate()


def test_combination_defaults():
    assert DistillConfig(objective="reverse").combination == "mean-prob"
    assert DistillConfig(objective="forward").combination == "mean-loss"
    assert DistillConfig(objective="forward", teacher_combination="mean-prob").combination == "mean-prob"


def test_combine_teachers(rng):
    a, b = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
    assert combine_teachers([a], "mean-prob")[0].tobytes() == a.tobytes()
    assert len(combine_teachers([a, b], "mean-loss")) == 2
    (merged,) = combine_teachers([a, b], "mean-prob")
    pa = np.exp(a) / np.exp(a).sum(-1, keepdims=True)
    pb = np.exp(b) / np.exp(b).sum(-1, keepdims=True)
    np.testing.assert_allclose(np.exp(merged), (pa + pb) / 2, atol=1e-15)
    with pytest.raises(ValueError):
        combine_teachers([], "mean-loss")


def test_segments_cover_sequence():
    assert segments(12, 5) == [(0, 5), (5, 10), (10, 12)]
    assert segments(4, 10) == [(0, 4)]
    with pytest.raises(ValueError):
        segments(4, 0)


@pytest.mark.parametrize("objective", ["reverse", "forward"])
@pytest.mark.parametrize("reduction", ["mean", "sum"])
def test_stepwise_equals_unchunked(objective, reduction, rng):
    zs, zt = rng.normal(size=(2, 11, 6)), rng.normal(size=(2, 11, 6))
    whole = kl_loss(Tensor(zs), zt, 2.0, reduction, objective).item()
    for k in (1, 3, 5, 11):
        assert stepwise_loss(Tensor(zs), zt, 2.0, k, reduction, objective).item() == pytest.approx(whole, abs=1e-12)


def test_total_loss_weighting():
    assert total_loss(2.0, 4.0, 0.25).item() == pytest.approx(3.5)
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, -0.1)


def test_two_teacher_mean_loss_averages(rng):
    zs = rng.normal(size=(1, 4, 6))
    t1, t2 = rng.normal(size=zs.shape), rng.normal(size=zs.shape)
    targets = rng.integers(1, 6, size=(1, 4))
    cfg = DistillConfig(objective="forward", teacher_count=2, stepwise=False)
    both = distillation_from_logits(Tensor(zs), [t1, t2], targets, cfg, beta=1.0).distillation
    one = [distillation_from_logits(Tensor(zs), [t], targets, DistillConfig(objective="forward", stepwise=False),
                                    beta=1.0).distillation for t in (t1, t2)]
    assert both == pytest.approx(sum(one) / 2, abs=1e-12)


def test_distillation_step_breakdown(rng):
    cfg_s = ModelConfig(vocab_size=6, max_seq_len=5, d_model=4, n_heads=1, n_layers=1, ffn_multiplier=2, seed=0)
    cfg_t = ModelConfig(vocab_size=6, max_seq_len=5, d_model=8, n_heads=2, n_layers=1, ffn_multiplier=2, seed=1)
    student, teacher = init_weights(cfg_s), init_weights(cfg_t, requires_grad=False)
    seq = rng.integers(1, 6, size=(2, 6))
    batch = Batch(seq[:, :-1], seq[:, 1:])
    cfg = DistillConfig()
    bd = distillation_step(student, cfg_s, [(teacher, cfg_t)], batch, cfg, EpochState(0, 6))
    assert bd.beta == 0.7
    assert bd.total == pytest.approx(0.5 * bd.student_ce + 0.5 * bd.distillation, abs=1e-12)
    assert bd.distillation >= 0
    ad.backward(bd.loss)
    assert all(np.isfinite(w.grad).all() for w in student.values())
    with pytest.raises(ValueError):
        distillation_step(student, cfg_s, [], batch, cfg, EpochState(0, 6))


def _logits(probs):
    return np.log(np.maximum(np.asarray(probs, dtype=float), 1e-300)).reshape(1, 1, -1)


def test_hand_evaluated_kl_values():
    q, p = _logits([0.9, 0.1]), _logits([0.5, 0.5])
    assert reverse_kl_loss(q, p, T=1.0).item() == pytest.approx(0.9 * np.log(1.8) + 0.1 * np.log(0.2), abs=1e-12)
    assert forward_kl_loss(q, p, T=1.0).item() == pytest.approx(0.5 * np.log(0.5 / 0.9) + 0.5 * np.log(5), abs=1e-12)
    assert reverse_kl_loss(q, p, T=1.0).item() == pytest.approx(0.3681, abs=1e-4)
    assert forward_kl_loss(q, p, T=1.0).item() == pytest.approx(0.5108, abs=1e-4)


def test_near_one_hot_student_against_uniform():
    eps = 1e-9
    q, p = _logits([1 - eps, eps]), _logits([0.5, 0.5])
    assert reverse_kl_loss(q, p, T=1.0).item() == pytest.approx(np.log(2), abs=1e-7)
    t2 = reverse_kl_loss(q, p, T=2.0).item()
    qs = np.array([1 - eps, eps]) ** 0.5
    qs /= qs.sum()
    assert t2 == pytest.approx(4 * float(np.sum(qs * np.log(qs / 0.5))), abs=1e-12)


def test_mode_covering_signature():
    q = _logits([1 - 2e-6, 1e-6, 1e-6])
    p = np.array([0.0, 0.0, -1e4]).reshape(1, 1, 3)  # teacher [0.5, 0.5, 0]
    reverse = reverse_kl_loss(q, p, T=1.0).item()
    forward = forward_kl_loss(q, p, T=1.0).item()
    assert reverse < 1.0
    assert forward > 5.0  # 0.5 * ln(0.5 / 1e-6), grows without bound as the student sharpens


def test_identical_teachers_match_single_teacher(rng):
    zs = rng.normal(size=(1, 5, 7))
    zt = rng.normal(size=zs.shape)
    targets = rng.integers(1, 7, size=(1, 5))
    single = distillation_from_logits(Tensor(zs), [zt], targets, DistillConfig(), 0.4).distillation
    for mode in ("mean-loss", "mean-prob"):
        cfg = DistillConfig(teacher_count=2, teacher_combination=mode)
        double = distillation_from_logits(Tensor(zs), [zt, zt.copy()], targets, cfg, 0.4).distillation
        assert double == pytest.approx(single, abs=1e-10)


def test_opposite_one_hot_teachers_average_to_uniform():
    a = np.array([[50.0, -50.0]])
    b = np.array([[-50.0, 50.0]])
    (merged,) = combine_teachers([a, b], "mean-prob")
    np.testing.assert_allclose(np.exp(merged), [[0.5, 0.5]], atol=1e-15)


def test_teacher_copy_gives_zero_distillation(rng):
    cfg = ModelConfig(vocab_size=6, max_seq_len=5, d_model=4, n_heads=1, n_layers=1, ffn_multiplier=2, seed=0)
    student = init_weights(cfg)
    copy = {k: Tensor(v.data.copy()) for k, v in student.items()}
    seq = rng.integers(1, 6, size=(2, 6))
    batch = Batch(seq[:, :-1], seq[:, 1:])
    bd = distillation_step(student, cfg, [(copy, cfg)], batch, DistillConfig(progressive=False, beta_start=1.0),
                           EpochState(0, 6))
    assert abs(bd.distillation) < 1e-9
    ce_only = distillation_step(student, cfg, [(copy, cfg)], batch, DistillConfig(alpha=1.0), EpochState(0, 6))
    assert ce_only.total == ce_only.student_ce


def test_full_length_segments():
    spans = segments(128, 5)
    assert len(spans) == 26
    assert [b - a for a, b in spans].count(5) == 25 and spans[-1] == (125, 128)


def test_schedule_is_monotone_and_floored():
    values = [beta_at_epoch(e, 10) for e in range(11)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert min(values) == 0.1


def test_reverse_kl_gradient_step_descends(rng):
    for _ in range(20):
        zs = Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True)
        zt = rng.normal(size=zs.shape)
        loss = reverse_kl_loss(zs, zt)
        before = loss.item()
        ad.backward(loss)
        assert reverse_kl_loss(zs.data - 1e-3 * zs.grad, zt).item() < before


def test_loss_exceeds_zero_for_separated_distributions(rng):
    for _ in range(200):
        zs, zt = rng.normal(size=(1, 1, 6)), rng.normal(size=(1, 1, 6))
        ps = np.exp(zs) / np.exp(zs).sum()
        pt = np.exp(zt) / np.exp(zt).sum()
        if 0.5 * np.abs(ps - pt).sum() >= 0.01:
            assert reverse_kl_loss(zs, zt, T=1.0).item() > 0
            assert forward_kl_loss(zs, zt, T=1.0).item() > 0
