"""How the Monte Carlo objective tightens with more samples.

On a scalar linear-Gaussian model the exact log marginal likelihood comes
from a Kalman filter. We evaluate the sampled objective with a deliberately
poor initial-state posterior and watch the gap close as K grows.
"""
import math

import numpy as np
import torch

from infossm import gp, objective, ssm

a, b, q, r, dt = -0.5, 0.2, 0.3, 0.2, 0.5
mode = gp.SparseGPMode.initialize([[0.0]], 1, signal_std=1e-7, length_scales=[10.0],
                                  H=[[a]], b=[b], S_scale=1.0, Sigma=1.0, noise_var=q)
model = ssm.MultiModalSSM([mode], ssm.ModeTransitionMatrix.identity(1), ssm.ObservationModel([0], r, 1),
                          ssm.CanonicalLayout(order=1, spatial_dim=1), dt)

rng = np.random.default_rng(0)
m0, P0, T = 0.7, 0.16, 10
y = ssm.generate_trajectory(torch.tensor([m0 + 0.4 * rng.standard_normal()]), np.zeros(T - 1, int),
                            model, rng).detach().numpy()[None]

# exact answer
F, c, Qn = 1 + dt * a, dt * b, dt * dt * q
m, P, exact = m0, P0, 0.0
for t, yt in enumerate(y[0, :, 0]):
    if t:
        m, P = F * m + c, F * F * P + Qn
    S = P + r
    exact += -0.5 * (math.log(2 * math.pi * S) + (yt - m) ** 2 / S)
    m, P = m + P / S * (yt - m), P * r / S


class Posterior:
    """q(x_1) = N(0, 1): wide and off-centre on purpose."""

    def encode(self, y):
        n = y.shape[0]
        return torch.zeros(n, 1, dtype=torch.float64), torch.ones(n, 1, dtype=torch.float64)

    def code_log_probs(self, y, angle=None, rng=None):
        return torch.zeros(y.shape[0], 1, dtype=torch.float64)


priors = objective.Priors([m0], [P0], [1.0], shifted=False)
print(f"Kalman log p(y) = {exact:.3f}")
for K in (1, 4, 16, 64, 256, 1024):
    vals = []
    with torch.no_grad():
        for s in range(50):
            draws = objective.MCODraws.sample(s, 1, K, T, 1, 1, 1)
            vals.append(float(objective.mco(torch.as_tensor(y), model, Posterior(), priors, draws)))
    vals = np.array(vals)
    print(f"K={K:5d}  mean {vals.mean():8.3f}  gap {exact - vals.mean():6.3f}  sd {vals.std():.3f}")
