"""Multi-modal GP state-space model on a canonical integrator-chain state.

State layout for ``order`` k and spatial dimension D is
``[p (D), v (D), a (D), ...][:k*D]``. The chain slots integrate the next
block (p' = v, v' = a) and the GP experts drive the derivative of the top
block. Mode indices are zero-based.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import gp
from .diffmath import DTYPE, ShapeMismatch, as_tensor, value

DimensionMismatch = ShapeMismatch

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class CanonicalLayout:
    order: int
    spatial_dim: int
    gp_input_indices: tuple = None
    gp_output_indices: tuple = None

    def __post_init__(self):
        if self.order not in (1, 2, 3):
            raise ValueError("layout order must be 1, 2 or 3")
        D = self.spatial_dim
        top = tuple(range((self.order - 1) * D, self.order * D))
        if self.gp_output_indices is None:
            self.gp_output_indices = top
        if tuple(self.gp_output_indices) != top:
            raise ValueError("the GP must drive the highest-derivative block")
        if self.gp_input_indices is None:
            self.gp_input_indices = tuple(range(D, self.state_dim)) if self.order > 1 else top
        self.gp_input_indices = tuple(int(i) for i in self.gp_input_indices)
        self.gp_output_indices = tuple(int(i) for i in self.gp_output_indices)
        if not self.gp_input_indices or max(self.gp_input_indices) >= self.state_dim:
            raise ValueError("gp_input_indices out of range")

    @property
    def state_dim(self):
        return self.order * self.spatial_dim

    @property
    def position_indices(self):
        return tuple(range(self.spatial_dim))

    @property
    def gp_input_dim(self):
        return len(self.gp_input_indices)

    @property
    def gp_output_dim(self):
        return self.spatial_dim

    def gp_input(self, x):
        return x[..., list(self.gp_input_indices)]

    def derivative(self, x, g):
        """State derivative: chain slots take the next block, the top block takes ``g``."""
        D = self.spatial_dim
        if self.order == 1:
            return g
        return torch.cat([x[..., D:], g], dim=-1)

    def to_dict(self):
        return {"order": self.order, "spatial_dim": self.spatial_dim,
                "gp_input_indices": list(self.gp_input_indices),
                "gp_output_indices": list(self.gp_output_indices)}

    @classmethod
    def dubins(cls):
        return cls(order=2, spatial_dim=2)


class ModeTransitionMatrix:
    """Row-stochastic mode transition matrix, optionally trainable through row softmax."""

    def __init__(self, probs=None, logits=None, trainable: bool = False):
        if (probs is None) == (logits is None):
            raise ValueError("give exactly one of probs or logits")
        if logits is not None:
            self.logits = value(logits, trainable)
            self._fixed = None
        else:
            p = np.asarray(probs, dtype=float)
            if p.ndim != 2 or p.shape[0] != p.shape[1]:
                raise ValueError("transition matrix must be square")
            if np.any(p < 0) or np.any(p > 1) or np.any(np.abs(p.sum(1) - 1.0) > 1e-12):
                raise ValueError("transition matrix rows must be probability vectors")
            if trainable:
                self.logits = value(np.log(np.clip(p, 1e-12, None)), True)
                self._fixed = None
            else:
                self.logits = None
                self._fixed = value(p)
        self.trainable = trainable

    @property
    def probs(self) -> torch.Tensor:
        if self._fixed is not None:
            return self._fixed
        return torch.softmax(self.logits, dim=-1)

    @property
    def L(self):
        return self.probs.shape[0]

    def numpy(self):
        return self.probs.detach().numpy().copy()

    def is_identity(self):
        return bool(np.array_equal(self.numpy(), np.eye(self.L)))

    def parameters(self):
        return [self.logits] if self.trainable else []

    @classmethod
    def identity(cls, L):
        return cls(np.eye(L))

    @classmethod
    def sticky(cls, L, stay=0.9):
        if L == 1:
            return cls(np.ones((1, 1)))
        off = (1.0 - stay) / (L - 1)
        P = np.full((L, L), off)
        np.fill_diagonal(P, stay)
        return cls(P)


class ObservationModel:
    """y = x[indices] + N(0, diag(noise_var))."""

    def __init__(self, indices, noise_var, state_dim, trainable: bool = True):
        self.indices = tuple(int(i) for i in indices)
        self.state_dim = state_dim
        nv = np.atleast_1d(np.asarray(noise_var, dtype=float))
        if nv.shape[0] == 1 and len(self.indices) > 1:
            nv = np.full(len(self.indices), nv[0])
        if nv.shape[0] != len(self.indices) or np.any(nv <= 0):
            raise ValueError("noise_var must be positive, one per observed slot")
        self.log_noise_var = value(np.log(nv), trainable)
        self.trainable = trainable

    @property
    def noise_var(self):
        return self.log_noise_var.exp()

    @property
    def obs_dim(self):
        return len(self.indices)

    @property
    def C(self):
        C = np.zeros((self.obs_dim, self.state_dim))
        C[np.arange(self.obs_dim), list(self.indices)] = 1.0
        return C

    def mean(self, x):
        return x[..., list(self.indices)]

    def parameters(self):
        return [self.log_noise_var] if self.trainable else []


@dataclass
class MultiModalSSM:
    modes: list
    P: ModeTransitionMatrix
    obs: ObservationModel
    layout: CanonicalLayout
    dt: float

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if len(self.modes) != self.P.L:
            raise ValueError(f"{len(self.modes)} modes but a {self.P.L}x{self.P.L} transition matrix")
        for m in self.modes:
            if m.P != self.layout.gp_input_dim or m.Q != self.layout.gp_output_dim:
                raise DimensionMismatch("mode dimensions do not match the layout")

    @property
    def L(self):
        return len(self.modes)

    @property
    def state_dim(self):
        return self.layout.state_dim

    def parameters(self):
        params = [p for m in self.modes for p in m.parameters()]
        return params + self.obs.parameters() + self.P.parameters()

    def posterior(self) -> gp.GPPosterior:
        return gp.stack_posteriors([gp.posterior(m) for m in self.modes])

    def kl(self):
        return sum(gp.matrix_normal_kl(m) for m in self.modes)


def propagate(x, code_weights, eps, model: MultiModalSSM, post: gp.GPPosterior | None = None,
              noise: bool = True):
    """One reparameterized transition for a batch of states.

    x: (B, S); code_weights: (B, L) one-hot (possibly straight-through);
    eps: (B, Q) standard-normal draws shared by all experts.
    """
    post = model.posterior() if post is None else post
    xin = model.layout.gp_input(x)
    r, v = gp.posterior_moments(xin, post)
    if noise:
        var = v.unsqueeze(-1) * post.Sigma[:, None, :] + post.noise_var[:, None, :]
        f_all = r + var.sqrt() * eps.unsqueeze(0)
    else:
        f_all = r
    f = torch.einsum("bl,lbq->bq", code_weights, f_all)
    return x + model.dt * model.layout.derivative(x, f)


def rollout(x1, code_weights, eps, model: MultiModalSSM, post=None, noise: bool = True):
    """Roll states forward; ``code_weights`` (B, T-1, L), ``eps`` (B, T-1, Q) -> (B, T, S)."""
    post = model.posterior() if post is None else post
    xs = [x1]
    x = x1
    for t in range(code_weights.shape[1]):
        x = propagate(x, code_weights[:, t], eps[:, t], model, post, noise)
        xs.append(x)
    return torch.stack(xs, dim=1)


def transition_moments(x_t, c_t: int, model: MultiModalSSM):
    """Gaussian (mean, covariance) of x_{t+1} given x_t and mode ``c_t``."""
    x_t = as_tensor(x_t)
    if x_t.shape[-1] != model.state_dim:
        raise DimensionMismatch(f"state of dim {x_t.shape[-1]} vs layout dim {model.state_dim}")
    if not 0 <= c_t < model.L:
        raise IndexError(f"mode index {c_t} out of range for L={model.L}")
    mode = model.modes[c_t]
    r, v = gp.predict_moments(model.layout.gp_input(x_t), mode)
    mean = x_t + model.dt * model.layout.derivative(x_t, r)
    cov = torch.zeros(model.state_dim, model.state_dim, dtype=DTYPE)
    idx = list(model.layout.gp_output_indices)
    block = model.dt ** 2 * (v * mode.Sigma + mode.noise_var)
    cov[idx, idx] = block
    return mean, cov


def code_step_distribution(c_t: int, P: ModeTransitionMatrix):
    if not 0 <= c_t < P.L:
        raise IndexError(f"mode index {c_t} out of range for L={P.L}")
    return P.probs[c_t]


def sample_code_path(c1, P, length, rng: np.random.Generator):
    """Ancestral code sequences of ``length`` for each initial code in ``c1``."""
    c1 = np.atleast_1d(np.asarray(c1, dtype=int))
    Pn = P.numpy() if isinstance(P, ModeTransitionMatrix) else np.asarray(P)
    path = np.empty((len(c1), length), dtype=int)
    path[:, 0] = c1
    if length > 1 and np.array_equal(Pn, np.eye(len(Pn))):
        path[:, 1:] = c1[:, None]
        return path
    cdf = np.cumsum(Pn, axis=1)
    for t in range(1, length):
        u = rng.random(len(c1))
        nxt = (u[:, None] > cdf[path[:, t - 1]]).sum(1)
        path[:, t] = np.minimum(nxt, len(Pn) - 1)
    return path


def observation_log_likelihood(y, x, obs: ObservationModel):
    """log N(y; C x, diag(noise_var)), summed over observation dims."""
    y, x = as_tensor(y), as_tensor(x)
    if y.shape[-1] != obs.obs_dim or x.shape[-1] != obs.state_dim:
        raise DimensionMismatch("observation/state dims disagree with the observation model")
    nv = obs.noise_var
    r = y - obs.mean(x)
    return -0.5 * (LOG_2PI * obs.obs_dim + torch.log(nv).sum() + (r.pow(2) / nv).sum(-1))


def generate_trajectory(x1, codes, model: MultiModalSSM, rng=None, *, process_draws=None,
                        obs_draws=None, return_states: bool = False):
    """Ancestral sample y_{1:T} given x_1 and the code sequence c_{1:T-1}.

    Draws come from ``rng`` (seed or Generator) unless passed explicitly, in
    which case the result is a differentiable function of model parameters.
    """
    codes = np.asarray(codes, dtype=int)
    T = len(codes) + 1
    if T < 2:
        raise ValueError("need at least one code (T >= 2)")
    if codes.min() < 0 or codes.max() >= model.L:
        raise IndexError("code out of range")
    x1 = as_tensor(x1)
    if process_draws is None or obs_draws is None:
        g = np.random.default_rng(rng)
        if process_draws is None:
            process_draws = g.standard_normal((T - 1, model.layout.gp_output_dim))
        if obs_draws is None:
            obs_draws = g.standard_normal((T, model.obs.obs_dim))
    w = torch.nn.functional.one_hot(torch.as_tensor(codes), model.L).to(DTYPE)
    states = rollout(x1[None], w[None], as_tensor(process_draws)[None], model)[0]
    y = model.obs.mean(states) + model.obs.noise_var.sqrt() * as_tensor(obs_draws)
    return (y, states) if return_states else y
