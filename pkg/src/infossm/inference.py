"""Amortized posteriors over the initial state and the initial dynamics code."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .diffmath import DTYPE, ShapeMismatch, as_tensor

LOG_2PI = math.log(2.0 * math.pi)
LOGIT_FLOOR = -30.0


class DegenerateDistribution(ValueError):
    pass


def _angles(angle, batch: int, rng):
    if isinstance(angle, str):
        if angle.lower() != "random":
            raise ValueError(f"unknown angle policy {angle!r}")
        rng = np.random.default_rng(rng)
        return torch.as_tensor(rng.uniform(0.0, 2.0 * np.pi, size=batch), dtype=DTYPE)
    a = as_tensor(angle)
    return a.expand(batch) if a.dim() == 0 else a


def canonicalize(y, angle=0.0, rng=None, horizontal=(0, 1)):
    """Shift each trajectory so it starts at the origin, then rotate the horizontal plane.

    ``y`` is (T, D) or (B, T, D); ``angle`` a float, a per-trajectory array,
    or ``"random"`` (uniform on [0, 2pi) drawn from ``rng``).
    """
    y = as_tensor(y)
    single = y.dim() == 2
    if single:
        y = y[None]
    if y.shape[1] < 2 or y.shape[2] < 2:
        raise ShapeMismatch("canonicalize needs T >= 2 and at least two horizontal dims")
    shifted = y - y[:, :1, :]
    a = _angles(angle, y.shape[0], rng)
    i, j = horizontal
    c, s = torch.cos(a)[:, None], torch.sin(a)[:, None]
    hx, hy = shifted[..., i], shifted[..., j]
    rx = c * hx - s * hy
    ry = s * hx + c * hy
    cols = [shifted[..., k] for k in range(y.shape[2])]
    cols[i], cols[j] = rx, ry
    out = torch.stack(cols, dim=-1)
    return out[0] if single else out


def _frame(y, angle, rng=None):
    # one-dimensional observations have no plane to rotate, so only the shift applies
    if y.shape[-1] < 2:
        return y - y[:, :1, :]
    return canonicalize(y, angle, rng)


def derivative_map(T: int, order: int, dt: float) -> torch.Tensor:
    """(order, T) least-squares weights giving derivatives 0..order-1 at t_1.

    Row k applied to a sampled signal returns the k-th derivative at the first
    sample of its degree-``order`` polynomial fit.
    """
    t = np.arange(T) * dt
    deg = min(order, T - 1)
    V = np.vander(t, deg + 1, increasing=True)
    coef = np.linalg.pinv(V)  # (deg+1, T)
    rows = [math.factorial(k) * coef[k] if k <= deg else np.zeros(T) for k in range(order)]
    return torch.as_tensor(np.stack(rows), dtype=DTYPE)


class InferenceNets(nn.Module):
    """Backward GRU encoder for q(x_1) and an MLP code classifier Q_phi.

    The encoder sees the shifted trajectory turned so its net displacement
    points along +x, adds a GRU correction to a polynomial-fit estimate of
    x_1, and turns the result back, so q(x_1) is in world coordinates. The
    classifier sees a shifted and rotated copy.
    """

    def __init__(self, obs_dim: int, state_dim: int, T: int, L: int, observed_indices,
                 hidden: int = 32, classifier_hidden: int = 64, obs_scale: float = 1.0,
                 init_var: float = 0.05, align: bool = True, dt: float | None = None):
        super().__init__()
        self.obs_dim, self.state_dim, self.T, self.L = obs_dim, state_dim, T, L
        self.align = align and obs_dim >= 2
        self.dt = dt
        self.observed_indices = tuple(int(i) for i in observed_indices)
        self.gru = nn.GRU(obs_dim, hidden, batch_first=True)
        self.head = nn.Sequential(nn.Linear(hidden, hidden), nn.Tanh(), nn.Linear(hidden, 2 * state_dim))
        self.classifier = nn.Sequential(
            nn.Linear(T * obs_dim, classifier_hidden), nn.Tanh(),
            nn.Linear(classifier_hidden, classifier_hidden), nn.Tanh(),
            nn.Linear(classifier_hidden, L))
        self.register_buffer("obs_scale", torch.tensor(float(obs_scale)))
        order = state_dim // obs_dim
        if dt is not None:
            self.register_buffer("base_map", derivative_map(T, order, dt))
        else:
            self.register_buffer("base_map", torch.zeros(order, T))
        self.to(DTYPE)
        with torch.no_grad():
            last = self.head[-1]
            last.bias[state_dim:] = math.log(math.expm1(init_var))

    def encode(self, y):
        """(mu, var) of q(x_1 | y_{1:T}) for y of shape (B, T, D)."""
        y = as_tensor(y)
        if y.dim() != 3 or y.shape[-1] != self.obs_dim:
            raise ShapeMismatch(f"expected (B, T, {self.obs_dim}) observations, got {tuple(y.shape)}")
        angle = torch.zeros(y.shape[0], dtype=DTYPE)
        if self.align:
            d = (y[:, -1, :2] - y[:, 0, :2]).detach()
            angle = -torch.atan2(d[:, 1], d[:, 0])
        shifted = _frame(y, angle)
        rev = torch.flip(shifted, dims=[1]) / self.obs_scale
        _, h = self.gru(rev)
        out = self.head(h[-1])
        mu = out[:, :self.state_dim] * self.obs_scale
        if shifted.shape[1] == self.base_map.shape[1]:
            # (B, order, D) derivative estimates flattened to the state layout
            mu = mu + torch.einsum("kt,btd->bkd", self.base_map, shifted).reshape(mu.shape)
        var = (nn.functional.softplus(out[:, self.state_dim:]) + 1e-8) * self.obs_scale ** 2
        if self.align:
            mu, var = self._rotate_back(mu, var, -angle)
        offset = torch.zeros_like(mu)
        offset[:, list(self.observed_indices)] = y[:, 0, :]
        return mu + offset, var

    def _rotate_back(self, mu, var, angle):
        """Rotate each (x, y) slot pair by ``angle``; variances keep only their diagonal."""
        c, s = torch.cos(angle)[:, None], torch.sin(angle)[:, None]
        D = self.obs_dim
        xi = torch.arange(0, self.state_dim, D)
        yi = xi + 1
        mx, my = mu[:, xi], mu[:, yi]
        vx, vy = var[:, xi], var[:, yi]
        mu = mu.index_copy(1, xi, c * mx - s * my).index_copy(1, yi, s * mx + c * my)
        var = var.index_copy(1, xi, c * c * vx + s * s * vy).index_copy(1, yi, s * s * vx + c * c * vy)
        return mu, var

    def code_logits(self, y, angle="random", rng=None):
        y = as_tensor(y)
        if y.dim() != 3 or y.shape[1] != self.T or y.shape[2] != self.obs_dim:
            raise ShapeMismatch(f"classifier expects (B, {self.T}, {self.obs_dim}), got {tuple(y.shape)}")
        z = _frame(y, angle, rng) / self.obs_scale
        return self.classifier(z.reshape(z.shape[0], -1))

    def code_log_probs(self, y, angle="random", rng=None):
        return torch.log_softmax(self.code_logits(y, angle, rng), dim=-1)

    def code_probs(self, y, angle="random", rng=None):
        return torch.softmax(self.code_logits(y, angle, rng), dim=-1)

    def parameter_list(self):
        return [p for p in self.parameters()]

    def config(self):
        return {"obs_dim": self.obs_dim, "state_dim": self.state_dim, "T": self.T, "L": self.L,
                "observed_indices": list(self.observed_indices), "hidden": self.gru.hidden_size,
                "classifier_hidden": self.classifier[0].out_features,
                "obs_scale": float(self.obs_scale), "align": self.align, "dt": self.dt}


def encode_initial(y, nets):
    """Gaussian (mu, diag var) over x_1 for one trajectory (T, D) or a batch."""
    y = as_tensor(y)
    if y.dim() == 2:
        mu, var = nets.encode(y[None])
        return mu[0], var[0]
    return nets.encode(y)


def classify_code(y, nets, angle="random", rng=None):
    y = as_tensor(y)
    if y.dim() == 2:
        return nets.code_probs(y[None], angle, rng)[0]
    return nets.code_probs(y, angle, rng)


def sample_gaussian(mu, var, draw):
    return as_tensor(mu) + as_tensor(var).sqrt() * as_tensor(draw)


def gaussian_log_density(x, mu, var):
    """Diagonal Gaussian log density summed over the last axis."""
    x, mu, var = as_tensor(x), as_tensor(mu), as_tensor(var)
    return -0.5 * (LOG_2PI * x.shape[-1] + torch.log(var).sum(-1) + ((x - mu).pow(2) / var).sum(-1))


@dataclass
class GumbelConfig:
    temperature: float = 1.0
    anneal_start: float = 1.0
    anneal_end: float = 0.3
    anneal_decay: float = 1e-3
    straight_through: bool = True

    def __post_init__(self):
        for tau in (self.temperature, self.anneal_start, self.anneal_end):
            if not 0.0 < tau <= 10.0:
                raise ValueError("temperatures must lie in (0, 10]")
        if self.anneal_end > self.anneal_start:
            raise ValueError("anneal_end must not exceed anneal_start")

    def temperature_at(self, epoch: int) -> float:
        return max(self.anneal_end, self.anneal_start * math.exp(-self.anneal_decay * epoch))


def gumbel_from_uniform(u):
    u = as_tensor(u).clamp(1e-300, 1.0 - 1e-16)
    return -torch.log(-torch.log(u))


def sample_code(log_probs, tau: float, draws, straight_through: bool = True):
    """Gumbel-softmax relaxed code sample.

    Returns ``(soft, hard_index, st)``; ``st`` is the straight-through one-hot
    (hard in the forward pass, soft gradient) when requested, else ``soft``.
    ``log_probs`` are clamped at -30 so zero-probability codes stay finite.
    """
    log_probs = as_tensor(log_probs)
    if tau <= 0:
        raise ValueError("temperature must be positive")
    with torch.no_grad():
        p = log_probs.exp()
        if not torch.isfinite(log_probs.clamp_min(LOGIT_FLOOR)).all() or \
                (p.sum(-1) - 1.0).abs().max() > 1e-6:
            raise DegenerateDistribution("code probabilities are not a valid categorical")
    logits = log_probs.clamp_min(LOGIT_FLOOR) + gumbel_from_uniform(draws)
    soft = torch.softmax(logits / tau, dim=-1)
    hard = logits.detach().argmax(-1)
    if not straight_through:
        return soft, hard, soft
    one_hot = nn.functional.one_hot(hard, log_probs.shape[-1]).to(DTYPE)
    return soft, hard, one_hot + (soft - soft.detach())
