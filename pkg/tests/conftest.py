import math

import numpy as np
import pytest
import torch

from infossm import gp, ssm
from infossm.diffmath import DTYPE

torch.set_num_threads(1)


def linear_gaussian_model(a=-0.5, b=0.2, q=0.3, r=0.2, dt=0.5, x_scale=10.0):
    """1-D order-1 model whose single expert is the affine map a*x + b.

    The GP signal std is ~1e-7 and A = m(Z), so the predictive variance is
    negligible and x' = (1 + dt a) x + dt b + dt N(0, q) exactly up to 1e-14.
    """
    Z = np.array([[0.0]])
    mode = gp.SparseGPMode.initialize(Z, 1, signal_std=1e-7, length_scales=[x_scale],
                                      H=[[a]], b=[b], S_scale=1.0, Sigma=1.0, noise_var=q)
    layout = ssm.CanonicalLayout(order=1, spatial_dim=1)
    P = ssm.ModeTransitionMatrix.identity(1)
    obs = ssm.ObservationModel([0], r, 1)
    return ssm.MultiModalSSM([mode], P, obs, layout, dt)


def kalman(y, F, c, Qn, R, m0, P0):
    """Scalar Kalman filter: filtered means/vars and log p(y_{1:T})."""
    m, P = m0, P0
    means, vars_, ll = [], [], 0.0
    for t, yt in enumerate(y):
        if t > 0:
            m, P = F * m + c, F * F * P + Qn
        S = P + R
        ll += -0.5 * (math.log(2 * math.pi * S) + (yt - m) ** 2 / S)
        K = P / S
        m, P = m + K * (yt - m), (1 - K) * P
        means.append(m)
        vars_.append(P)
    return np.array(means), np.array(vars_), ll


def rts_initial(y, F, c, Qn, R, m0, P0):
    """Smoothed marginal of x_1 from a scalar RTS pass."""
    m, P = m0, P0
    fm, fP, pm, pP = [], [], [], []
    for t, yt in enumerate(y):
        if t > 0:
            m, P = F * m + c, F * F * P + Qn
        pm.append(m)
        pP.append(P)
        K = P / (P + R)
        m, P = m + K * (yt - m), (1 - K) * P
        fm.append(m)
        fP.append(P)
    sm, sP = fm[-1], fP[-1]
    for t in range(len(y) - 2, -1, -1):
        G = fP[t] * F / pP[t + 1]
        sm = fm[t] + G * (sm - pm[t + 1])
        sP = fP[t] + G * G * (sP - pP[t + 1])
    return sm, sP


class FixedPosterior:
    """Stand-in for the inference networks with a given q(x_1) and q(c_1)."""

    def __init__(self, mu, var, probs):
        self.mu = torch.as_tensor(np.atleast_2d(mu), dtype=DTYPE)
        self.var = torch.as_tensor(np.atleast_2d(var), dtype=DTYPE)
        self.probs = torch.as_tensor(np.atleast_2d(probs), dtype=DTYPE)

    def encode(self, y):
        n = y.shape[0]
        return self.mu.expand(n, -1), self.var.expand(n, -1)

    def code_log_probs(self, y, angle=None, rng=None):
        return torch.log(self.probs).expand(y.shape[0], -1)

    def code_probs(self, y, angle=None, rng=None):
        return self.probs.expand(y.shape[0], -1)


@pytest.fixture
def lg_model():
    return linear_gaussian_model()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
