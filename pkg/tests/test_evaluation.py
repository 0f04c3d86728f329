import math

import numpy as np
import pytest
import torch
from scipy.stats import norm

from conftest import FixedPosterior
from infossm import evaluation, gp, ssm
from infossm.diffmath import DTYPE
from infossm.evaluation import EvalReport, LengthMismatch


def test_rmse_examples():
    assert evaluation.rmse(np.zeros((2, 3, 2)), np.zeros((2, 3, 2))) == 0.0
    assert evaluation.rmse([[1.0, 1.0]], [[0.0, 0.0]]) == 1.0
    assert evaluation.rmse([3.0, 0.0], [0.0, 4.0]) == pytest.approx(math.sqrt(12.5))
    with pytest.raises(LengthMismatch):
        evaluation.rmse(np.zeros((3, 2)), np.zeros((4, 2)))


def test_log_likelihood_single_sample_is_gaussian_log_density():
    rng = np.random.default_rng(0)
    s, y = rng.standard_normal((1, 5, 2)), rng.standard_normal((5, 2))
    R = np.array([0.1, 0.3])
    expected = norm.logpdf(y, s[0], np.sqrt(R)).sum()
    assert evaluation.log_likelihood(s, y, R) == pytest.approx(expected, rel=1e-12)


def test_log_likelihood_averages_densities_not_logs():
    y = np.zeros((1, 1))
    s = np.array([[[0.0]], [[1.0]]])
    dens = 0.5 * (norm.pdf(0.0, 0.0, 1.0) + norm.pdf(0.0, 1.0, 1.0))
    assert evaluation.log_likelihood(s, y, 1.0) == pytest.approx(math.log(dens), rel=1e-12)
    # batched form is the mean over trajectories
    both = evaluation.log_likelihood(np.stack([s, s]), np.stack([y, y]), 1.0)
    assert both == pytest.approx(math.log(dens), rel=1e-12)
    with pytest.raises(LengthMismatch):
        evaluation.log_likelihood(s, np.zeros((2, 1)), 1.0)


def test_eval_report_validation_and_lines():
    with pytest.raises(ValueError):
        EvalReport(-1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        EvalReport(float("nan"), 0.0, 0.0)
    lines = EvalReport(0.5, -2.0, -0.01, [(0, 0.5, -2.0, 1)]).lines()
    assert lines[0] == "rmse\t0.500000"
    assert lines[-1] == "0\t0.500000\t-2.000000\t1"


def test_heading_change_examples():
    assert evaluation.heading_change([[0, 0], [1, 0], [2, 0]]) == 0.0
    quarter = [[0, 0], [1, 0], [1, 1]]
    assert evaluation.heading_change(quarter) == pytest.approx(math.pi / 2)
    th = np.linspace(0, 3 * math.pi, 200)
    circle = np.column_stack([np.cos(th), np.sin(th)])
    # unwrapping keeps the full one and a half turns
    assert evaluation.heading_change(circle) == pytest.approx(3 * math.pi, abs=0.05)
    assert evaluation.heading_change(circle[:, ::-1]) == pytest.approx(-3 * math.pi, abs=0.05)


def test_sign_matching_rule():
    tol = evaluation.STRAIGHT_TOLERANCE
    assert evaluation._sign_matches(2.0, 1.0) and not evaluation._sign_matches(-2.0, 1.0)
    assert evaluation._sign_matches(-2.0, -1.0)
    assert evaluation._sign_matches(0.9 * tol, 0.0) and not evaluation._sign_matches(1.1 * tol, 0.0)
    assert not evaluation._sign_matches(0.5 * tol, 1.0)


def test_reconstruct_shapes_and_determinism(lg_model):
    y = np.linspace(0, 1, 7)[:, None]
    nets = FixedPosterior([0.0], [0.2], [1.0])
    a = evaluation.reconstruct(y, lg_model, nets, 12, 3)
    b = evaluation.reconstruct(y, lg_model, nets, 12, 3)
    assert a.samples.shape == (12, 7, 1) and a.states.shape == (12, 7, 1)
    assert a.mean.shape == (7, 1) and a.codes.shape == (12,)
    assert np.array_equal(a.samples, b.samples)
    assert np.allclose(a.mean, a.samples.mean(0))
    rows = evaluation.plot_rows(a, y, dt=0.5)
    assert rows.shape == (7, 5)
    assert np.allclose(rows[:, 0], 0.5 * np.arange(7))
    assert np.all(rows[:, 3] <= rows[:, 2]) and np.all(rows[:, 2] <= rows[:, 4])


def test_reconstruct_does_not_look_past_the_initial_state(lg_model):
    # open loop: only the encoder sees y, so a stub encoder makes y irrelevant
    nets = FixedPosterior([0.3], [0.1], [1.0])
    a = evaluation.reconstruct(np.zeros((6, 1)), lg_model, nets, 5, 1)
    b = evaluation.reconstruct(np.full((6, 1), 9.0), lg_model, nets, 5, 1)
    assert np.array_equal(a.samples, b.samples)


def test_reconstruction_of_exact_linear_model_matches_mean(lg_model):
    # x' = 0.75 x + 0.1 with tiny process noise: mean path is analytic
    mode = gp.SparseGPMode.initialize([[0.0]], 1, signal_std=1e-7, length_scales=[10.0],
                                      H=[[-0.5]], b=[0.2], S_scale=1.0, Sigma=1.0, noise_var=1e-12)
    model = ssm.MultiModalSSM([mode], ssm.ModeTransitionMatrix.identity(1),
                              ssm.ObservationModel([0], 0.2, 1), ssm.CanonicalLayout(1, 1), 0.5)
    rec = evaluation.reconstruct(np.zeros((5, 1)), model, FixedPosterior([1.0], [1e-20], [1.0]), 4, 0)
    x, path = 1.0, []
    for _ in range(5):
        path.append(x)
        x = 0.75 * x + 0.1
    assert np.allclose(rec.mean[:, 0], path, atol=1e-8)


class DubinsOracleNets:
    """Encoder returns the true initial state; classifier reads the warmup turn direction."""

    def encode(self, y):
        n = y.shape[0]
        d = y[:, 1] - y[:, 0]
        v = d / d.norm(dim=-1, keepdim=True)
        return torch.cat([y[:, 0], v], 1), torch.full((n, 4), 1e-12, dtype=DTYPE)

    def code_probs(self, y, angle=None, rng=None):
        turn = torch.as_tensor([evaluation.heading_change(t.numpy()) for t in y])
        code = torch.where(turn > 0.3, 2, torch.where(turn < -0.3, 0, 1))
        return torch.nn.functional.one_hot(code, 3).to(DTYPE)


def exact_dubins_model():
    J = np.array([[0.0, -1.0], [1.0, 0.0]])
    modes = [gp.SparseGPMode.initialize(np.zeros((1, 2)), 2, signal_std=1e-7, H=u * J, noise_var=1e-12)
             for u in (-1.0, 0.0, 1.0)]
    return ssm.MultiModalSSM(modes, ssm.ModeTransitionMatrix.identity(3),
                             ssm.ObservationModel([0, 1], 0.1, 4), ssm.CanonicalLayout.dubins(), 0.1)


def test_long_term_prediction_with_exact_dynamics():
    preds = evaluation.long_term_prediction(exact_dubins_model(), DubinsOracleNets(), rng=0)
    assert [p.control for p in preds] == [-1.0, 0.0, 1.0]
    assert [p.code for p in preds] == [0, 1, 2]
    assert all(p.sign_ok for p in preds)
    straight = preds[1]
    assert straight.truth[-1] == pytest.approx([10.0, 0.0], abs=1e-9)
    assert straight.terminal_error < 1e-6
    assert preds[0].heading_change < -5 and preds[2].heading_change > 5


def test_tracking_errors_shape(lg_model):
    y = np.linspace(0, 1, 5)[None, :, None].repeat(3, 0)
    e = evaluation.tracking_errors(y, lg_model, FixedPosterior([0.0], [0.3], [1.0]), y, K=32, rng=0, S=4)
    assert e.shape == (3, 2) and np.all(e >= 0)


def test_evaluate_report(lg_model):
    rng = np.random.default_rng(1)
    y = rng.standard_normal((3, 6, 1))
    nets = FixedPosterior([0.0], [0.3], [1.0])
    rep = evaluation.evaluate(lg_model, nets, y, S=5, rng=2, mi_samples=20)
    assert len(rep.rows) == 3
    assert np.isfinite(rep.rmse) and np.isfinite(rep.mean_log_likelihood)
    # a single code makes the classifier bound exactly log 1
    assert rep.mi == 0.0
    again = evaluation.evaluate(lg_model, nets, y, S=5, rng=2, mi_samples=20)
    assert again.lines() == rep.lines()
