"""Particle filtering with a learned multi-modal model.

Particles carry a latent state, a dynamics code and a weight. Each step
samples the next code from the transition matrix, propagates the state
through that code's GP expert, reweights by the observation likelihood and
resamples when the effective sample size falls to K/2 or below.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import ssm
from .diffmath import DTYPE

log = logging.getLogger(__name__)


class ZeroWeights(ValueError):
    pass


@dataclass
class ParticleSet:
    states: np.ndarray
    codes: np.ndarray
    weights: np.ndarray
    ess: float = float("nan")
    resampled: bool = False

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.codes = np.asarray(self.codes, dtype=int)
        self.weights = np.asarray(self.weights, dtype=float)
        K = len(self.weights)
        if K < 1 or self.states.shape[0] != K or self.codes.shape[0] != K:
            raise ValueError("states, codes and weights must have one row per particle")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-10:
            raise ValueError("particle weights must be non-negative and sum to 1")

    @property
    def K(self):
        return len(self.weights)

    def mean(self):
        return self.weights @ self.states

    def covariance(self):
        d = self.states - self.mean()
        return (self.weights[:, None] * d).T @ d

    def code_marginal(self, L):
        return np.bincount(self.codes, weights=self.weights, minlength=L)[:L]

    @classmethod
    def uniform(cls, states, codes):
        K = len(states)
        return cls(states, codes, np.full(K, 1.0 / K))


def ess(weights) -> float:
    w = np.asarray(weights, dtype=float)
    s = np.sum(w ** 2)
    if s == 0.0:
        raise ZeroWeights("all weights are zero")
    return 1.0 / s


def resample_indices(weights, rng: np.random.Generator, method: str = "multinomial"):
    w = np.asarray(weights, dtype=float)
    K = len(w)
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    if method == "multinomial":
        u = rng.random(K)
    elif method == "systematic":
        u = (rng.random() + np.arange(K)) / K
    else:
        raise ValueError(f"unknown resampling method {method!r}")
    return np.searchsorted(cdf, u, side="right")


def reweight(states, codes, prev_weights, log_lik, rng, method="multinomial") -> ParticleSet:
    """Weight update w ∝ w_prev * exp(log_lik), then resample if ESS <= K/2."""
    prev = np.asarray(prev_weights, dtype=float)
    with np.errstate(divide="ignore"):
        lw = np.log(prev) + np.asarray(log_lik, dtype=float)
    lw = np.where(np.isnan(lw), -np.inf, lw)
    K = len(prev)
    m = np.max(lw)
    if not np.isfinite(m):
        log.warning("all particle weights vanished; falling back to uniform weights")
        w = np.full(K, 1.0 / K)
    else:
        w = np.exp(lw - m)
        w /= w.sum()
    e = ess(w)
    if e <= K / 2:
        idx = resample_indices(w, rng, method)
        return ParticleSet(states[idx], codes[idx], np.full(K, 1.0 / K), e, True)
    return ParticleSet(states, codes, w, e, False)


def propagate_particles(states, codes, model: ssm.MultiModalSSM, rng: np.random.Generator,
                        P=None, post=None):
    """Sample c~ from the transition matrix and x~ from the chosen expert."""
    Pn = (model.P if P is None else P)
    Pn = Pn.numpy() if hasattr(Pn, "numpy") else np.asarray(Pn, dtype=float)
    K = len(codes)
    cdf = np.cumsum(Pn, axis=1)
    u = rng.random(K)
    new_codes = np.minimum((u[:, None] > cdf[codes]).sum(1), len(Pn) - 1)
    eps = rng.standard_normal((K, model.layout.gp_output_dim))
    with torch.no_grad():
        w = torch.nn.functional.one_hot(torch.as_tensor(new_codes), model.L).to(DTYPE)
        x = ssm.propagate(torch.as_tensor(states, dtype=DTYPE), w, torch.as_tensor(eps), model, post)
    return x.numpy(), new_codes


def pf_step(particles: ParticleSet, y_t, model: ssm.MultiModalSSM, rng: np.random.Generator,
            P=None, post=None, resampling: str = "multinomial") -> ParticleSet:
    x, c = propagate_particles(particles.states, particles.codes, model, rng, P, post)
    with torch.no_grad():
        ll = ssm.observation_log_likelihood(torch.as_tensor(np.asarray(y_t, float)),
                                            torch.as_tensor(x), model.obs).numpy()
    return reweight(x, c, particles.weights, ll, rng, resampling)


@dataclass
class TrackResult:
    particles: ParticleSet
    mean_state: np.ndarray
    code_probs: np.ndarray
    means: np.ndarray          # (T, S) filtered means at each window step
    code_history: np.ndarray   # (T, L)
    ess_history: np.ndarray    # (T,)

    def rows(self):
        """(t, mean state..., code probs..., ess) per window step."""
        T = len(self.means)
        return np.column_stack([np.arange(T), self.means, self.code_history, self.ess_history])


def init_particles(y_window, nets, K: int, rng: np.random.Generator, angle="random") -> ParticleSet:
    """K particles from the encoder posterior and classifier at the window start."""
    y = torch.as_tensor(np.asarray(y_window, float))[None]
    with torch.no_grad():
        mu, var = nets.encode(y)
        a = rng.uniform(0, 2 * np.pi) if angle == "random" else angle
        probs = nets.code_probs(y, a)[0].numpy()
    mu, var = mu[0].numpy(), var[0].numpy()
    states = mu + np.sqrt(var) * rng.standard_normal((K, len(mu)))
    codes = rng.choice(len(probs), size=K, p=probs / probs.sum())
    return ParticleSet.uniform(states, codes)


def track(y_window, model: ssm.MultiModalSSM, nets, K: int = 512, rng=None, P=None,
          resampling: str = "multinomial", angle="random") -> TrackResult:
    """Smoothing-initialized particle filter over one observation window."""
    rng = np.random.default_rng(rng)
    y_window = np.asarray(y_window, dtype=float)
    T = len(y_window)
    if T < 2:
        raise ValueError("tracking window needs at least two observations")
    with torch.no_grad():
        post = model.posterior()
    parts = init_particles(y_window, nets, K, rng, angle)
    means = [parts.mean()]
    codes = [parts.code_marginal(model.L)]
    esses = [ess(parts.weights)]
    for t in range(1, T):
        parts = pf_step(parts, y_window[t], model, rng, P, post, resampling)
        means.append(parts.mean())
        codes.append(parts.code_marginal(model.L))
        esses.append(parts.ess)
    return TrackResult(parts, means[-1], codes[-1], np.array(means), np.array(codes), np.array(esses))
