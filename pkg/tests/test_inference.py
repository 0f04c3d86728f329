import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from infossm import inference
from infossm.diffmath import DTYPE, ShapeMismatch
from infossm.inference import GumbelConfig, InferenceNets


def small_nets(T=6, L=3, hidden=8, align=True, dt=None, seed=0):
    torch.manual_seed(seed)
    return InferenceNets(2, 4, T, L, [0, 1], hidden=hidden, classifier_hidden=8, align=align, dt=dt)


def rot(a):
    return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


# ----------------------------------------------------------------- canonicalize

def test_canonicalize_zero_angle_is_pure_shift():
    y = torch.tensor([[1.0, 2.0, 5.0], [3.0, 1.0, 7.0]], dtype=DTYPE)
    assert torch.equal(inference.canonicalize(y, 0.0), y - y[0])


def test_canonicalize_quarter_turn():
    y = torch.tensor([[2.0, 3.0], [3.0, 3.0]], dtype=DTYPE)
    out = inference.canonicalize(y, math.pi / 2)
    assert torch.allclose(out[1], torch.tensor([0.0, 1.0], dtype=DTYPE), atol=1e-15)
    assert torch.equal(out[0], torch.zeros(2, dtype=DTYPE))


def test_canonicalize_shifts_vertical_slot_without_rotating():
    y = torch.tensor([[0.0, 0.0, 10.0], [1.0, 0.0, 12.0]], dtype=DTYPE)
    out = inference.canonicalize(y, 1.0)
    assert out[:, 2].tolist() == [0.0, 2.0]


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), angle=st.floats(-10, 10))
def test_canonicalize_preserves_pairwise_distances(seed, angle):
    y = torch.as_tensor(np.random.default_rng(seed).standard_normal((7, 2)) * 5)
    out = inference.canonicalize(y, angle)
    assert torch.allclose(torch.cdist(out, out), torch.cdist(y, y), atol=1e-12, rtol=0)


def test_canonicalize_shape_errors():
    with pytest.raises(ShapeMismatch):
        inference.canonicalize(torch.zeros(1, 2, dtype=DTYPE))
    with pytest.raises(ShapeMismatch):
        inference.canonicalize(torch.zeros(4, 1, dtype=DTYPE))


# ----------------------------------------------------------------- encoder

def test_encode_deterministic_and_positive():
    nets = small_nets()
    y = torch.as_tensor(np.random.default_rng(0).standard_normal((10_000, 6, 2)) * 3)
    with torch.no_grad():
        mu1, var1 = nets.encode(y)
        mu2, var2 = nets.encode(y.clone())
    assert torch.equal(mu1, mu2) and torch.equal(var1, var2)
    assert bool((var1 > 0).all())


def test_encode_is_translation_equivariant():
    nets = small_nets()
    y = torch.as_tensor(np.random.default_rng(1).standard_normal((3, 6, 2)))
    shift = torch.tensor([4.0, -2.0], dtype=DTYPE)
    with torch.no_grad():
        mu, var = nets.encode(y)
        mu2, var2 = nets.encode(y + shift)
    assert torch.allclose(mu2[:, :2], mu[:, :2] + shift, atol=1e-12)
    assert torch.allclose(mu2[:, 2:], mu[:, 2:], atol=1e-12)
    assert torch.allclose(var2, var, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), angle=st.floats(0, 2 * math.pi))
def test_aligned_encoder_is_rotation_equivariant(seed, angle):
    nets = small_nets(dt=0.1)
    y = np.random.default_rng(seed).standard_normal((6, 2)) + np.arange(6)[:, None] * [1.0, 0.3]
    R = rot(angle)
    with torch.no_grad():
        mu, _ = nets.encode(torch.as_tensor(y)[None])
        mu_r, _ = nets.encode(torch.as_tensor(y @ R.T)[None])
    mu, mu_r = mu[0].numpy(), mu_r[0].numpy()
    for sl in (slice(0, 2), slice(2, 4)):
        assert np.allclose(mu_r[sl], R @ mu[sl], atol=1e-9)


def test_derivative_map_recovers_polynomial_derivatives_at_start():
    dt, T = 0.1, 20
    t = np.arange(T) * dt
    sig = 1.5 + 0.7 * t - 0.4 * t ** 2
    W = inference.derivative_map(T, 2, dt).numpy()
    assert W @ sig == pytest.approx([1.5, 0.7], abs=1e-10)
    W3 = inference.derivative_map(T, 3, dt).numpy()
    assert W3 @ sig == pytest.approx([1.5, 0.7, -0.8], abs=1e-9)


def test_encoder_base_gives_line_velocity_for_untrained_nets():
    nets = small_nets(T=20, dt=0.1)
    with torch.no_grad():
        nets.head[-1].weight.zero_()
        nets.head[-1].bias[:4] = 0.0
    t = np.arange(20) * 0.1
    y = np.stack([2 + 0.6 * t, -1 + 0.8 * t], 1)
    with torch.no_grad():
        mu, _ = nets.encode(torch.as_tensor(y)[None])
    assert mu[0].numpy() == pytest.approx([2.0, -1.0, 0.6, 0.8], abs=1e-9)


def test_encode_initial_single_and_batch():
    nets = small_nets()
    y = torch.as_tensor(np.random.default_rng(2).standard_normal((2, 6, 2)))
    with torch.no_grad():
        mu, var = inference.encode_initial(y, nets)
        mu0, var0 = inference.encode_initial(y[0], nets)
    assert torch.allclose(mu[0], mu0, atol=1e-14) and torch.allclose(var[0], var0, atol=1e-14)
    with pytest.raises(ShapeMismatch):
        nets.encode(torch.zeros(2, 6, 3, dtype=DTYPE))


# ----------------------------------------------------------------- classifier

def test_classifier_probabilities_sum_to_one():
    nets = small_nets()
    y = torch.as_tensor(np.random.default_rng(3).standard_normal((50, 6, 2)) * 4)
    with torch.no_grad():
        p = inference.classify_code(y, nets, rng=0)
    assert torch.allclose(p.sum(-1), torch.ones(50, dtype=DTYPE), atol=1e-12, rtol=0)


def test_classifier_exactly_shift_invariant_at_fixed_angle():
    nets = small_nets()
    rng = np.random.default_rng(4)
    # dyadic values keep the shift exact in floating point
    y = torch.as_tensor(np.round(rng.standard_normal((5, 6, 2)) * 64) / 64)
    shift = torch.tensor([3.25, -17.5], dtype=DTYPE)
    with torch.no_grad():
        a = nets.code_probs(y, 0.7)
        b = nets.code_probs(y + shift, 0.7)
    assert torch.equal(a, b)


def test_classifier_random_angle_rotation_invariant_in_distribution():
    nets = small_nets(seed=5)
    with torch.no_grad():
        for p in nets.classifier.parameters():
            p.mul_(4.0)
    y = np.random.default_rng(6).standard_normal((6, 2)) + np.arange(6)[:, None] * [1.0, 0.5]
    yr = y @ rot(1.1).T
    n = 1000
    with torch.no_grad():
        pa = nets.code_probs(torch.as_tensor(y)[None].expand(n, -1, -1), rng=7).numpy()
        pb = nets.code_probs(torch.as_tensor(yr)[None].expand(n, -1, -1), rng=8).numpy()
    se = np.sqrt(pa.var(0) / n + pb.var(0) / n)
    assert np.all(np.abs(pa.mean(0) - pb.mean(0)) < 3 * se + 1e-12)


def test_classifier_wrong_length_rejected():
    nets = small_nets()
    with pytest.raises(ShapeMismatch):
        nets.code_probs(torch.zeros(1, 5, 2, dtype=DTYPE), 0.0)


def test_classifier_angle_policy_validation():
    with pytest.raises(ValueError):
        small_nets().code_probs(torch.zeros(1, 6, 2, dtype=DTYPE), "sideways")


# ----------------------------------------------------------------- Gaussian sampler

def test_sample_gaussian_and_density():
    mu = torch.tensor([1.0, -2.0], dtype=DTYPE)
    var = torch.tensor([0.5, 2.0], dtype=DTYPE)
    assert torch.equal(inference.sample_gaussian(mu, var, torch.zeros(2, dtype=DTYPE)), mu)
    d = 3
    val = inference.gaussian_log_density(torch.zeros(d, dtype=DTYPE), torch.zeros(d, dtype=DTYPE),
                                         torch.ones(d, dtype=DTYPE))
    assert float(val) == pytest.approx(-d / 2 * math.log(2 * math.pi), abs=1e-14)
    n = 100_000
    draws = np.random.default_rng(9).standard_normal((n, 2))
    x = inference.sample_gaussian(mu, var, draws).numpy()
    target = var.numpy()
    assert np.all(np.abs(x.var(0) - target) < 3 * target * math.sqrt(2 / n))


# ----------------------------------------------------------------- Gumbel

def test_gumbel_config_validation_and_schedule():
    with pytest.raises(ValueError):
        GumbelConfig(temperature=0.0)
    with pytest.raises(ValueError):
        GumbelConfig(anneal_start=0.5, anneal_end=0.8)
    g = GumbelConfig()
    assert g.temperature_at(0) == 1.0
    assert g.temperature_at(10**6) == 0.3
    assert g.temperature_at(500) == pytest.approx(math.exp(-0.5))


def test_uniform_probs_give_uniform_hard_frequencies():
    n, L = 100_000, 4
    lp = torch.full((n, L), -math.log(L), dtype=DTYPE)
    u = np.random.default_rng(10).random((n, L))
    _, hard, _ = inference.sample_code(lp, 1.0, u)
    freq = np.bincount(hard.numpy(), minlength=L) / n
    assert np.all(np.abs(freq - 1 / L) < 3 * math.sqrt((1 / L) * (1 - 1 / L) / n))


def test_hard_index_frequencies_match_probs():
    n = 100_000
    probs = np.array([0.6, 0.3, 0.1])
    lp = torch.as_tensor(np.log(probs)).expand(n, 3)
    _, hard, _ = inference.sample_code(lp, 0.5, np.random.default_rng(11).random((n, 3)))
    freq = np.bincount(hard.numpy(), minlength=3) / n
    assert np.all(np.abs(freq - probs) < 3 * np.sqrt(probs * (1 - probs) / n))


def test_low_temperature_concentrates():
    n = 10_000
    probs = np.array([0.5, 0.3, 0.2])
    lp = torch.as_tensor(np.log(probs)).expand(n, 3)
    soft, _, _ = inference.sample_code(lp, 0.01, np.random.default_rng(12).random((n, 3)))
    assert torch.allclose(soft.sum(-1), torch.ones(n, dtype=DTYPE))
    got = float((soft.max(-1).values > 0.99).double().mean())
    # independent oracle: the top entry exceeds 0.99 iff the other perturbed logits sit
    # far enough below the maximum
    g = np.log(probs) + np.random.default_rng(99).gumbel(size=(200_000, 3))
    gap = np.exp((g - g.max(1, keepdims=True)) / 0.01).sum(1)
    oracle = float((1.0 / gap > 0.99).mean())
    assert abs(got - oracle) < 3 * math.sqrt(oracle * (1 - oracle) / n) + 1e-3
    soft, _, _ = inference.sample_code(lp, 0.001, np.random.default_rng(13).random((n, 3)))
    assert float((soft.max(-1).values > 0.99).double().mean()) >= 0.99


def test_straight_through_is_hard_forward_soft_backward():
    lp = torch.log(torch.tensor([[0.2, 0.5, 0.3]], dtype=DTYPE)).requires_grad_(True)
    u = np.array([[0.3, 0.6, 0.2]])
    soft, hard, st_ = inference.sample_code(lp, 0.7, u, straight_through=True)
    assert st_.detach().tolist() == torch.nn.functional.one_hot(hard, 3).double().tolist()
    w = torch.tensor([1.0, -2.0, 0.5], dtype=DTYPE)
    (g_st,) = torch.autograd.grad((st_ * w).sum(), [lp], retain_graph=True)
    (g_soft,) = torch.autograd.grad((soft * w).sum(), [lp])
    assert torch.allclose(g_st, g_soft)


def test_zero_probability_code_stays_finite():
    lp = torch.log(torch.tensor([[1.0, 0.0, 0.0]], dtype=DTYPE))
    soft, hard, _ = inference.sample_code(lp, 0.3, np.array([[0.5, 0.99, 0.99]]))
    assert torch.isfinite(soft).all()
    assert int(hard) == 0


def test_invalid_categorical_raises():
    with pytest.raises(inference.DegenerateDistribution):
        inference.sample_code(torch.zeros(1, 3, dtype=DTYPE), 1.0, np.full((1, 3), 0.5))
    with pytest.raises(ValueError):
        inference.sample_code(torch.log(torch.full((1, 2), 0.5, dtype=DTYPE)), 0.0, np.full((1, 2), 0.5))


# ----------------------------------------------------------------- gradients

def _fd_params(module, fn, h=1e-6, per_tensor=3, seed=0):
    rng = np.random.default_rng(seed)
    params = list(module.parameters())
    grads = torch.autograd.grad(fn(), params)
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        for i in rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False):
            old = flat[i].item()
            flat[i] = old + h
            fp = fn().item()
            flat[i] = old - h
            fm = fn().item()
            flat[i] = old
            fd = (fp - fm) / (2 * h)
            gi = g.view(-1)[i].item()
            assert abs(gi - fd) <= 1e-4 * max(abs(fd), 1e-3), (p.shape, i, gi, fd)


def test_encoder_gradients_match_finite_differences():
    nets = small_nets(dt=0.1)
    y = torch.as_tensor(np.random.default_rng(13).standard_normal((3, 6, 2)))
    w = torch.as_tensor(np.random.default_rng(14).standard_normal((3, 8)))

    def fn():
        mu, var = nets.encode(y)
        return (torch.cat([mu, var], -1) * w).sum()

    _fd_params(nets.gru, fn)
    _fd_params(nets.head, fn)


def test_classifier_and_sampler_gradients_match_finite_differences():
    nets = small_nets()
    y = torch.as_tensor(np.random.default_rng(15).standard_normal((4, 6, 2)))
    u = np.random.default_rng(16).random((4, 3))
    w = torch.as_tensor(np.random.default_rng(17).standard_normal((4, 3)))

    def fn():
        lp = nets.code_log_probs(y, 0.4)
        soft, _, _ = inference.sample_code(lp, 0.8, u, straight_through=False)
        return (soft * w).sum() + (lp * w).sum()

    _fd_params(nets.classifier, fn)
