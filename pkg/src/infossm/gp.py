"""Sparse matrix-variate GP experts.

A mode carries inducing inputs ``Z`` and a matrix-normal variational
posterior ``q(U) = MN(A, S, Sigma)`` over inducing outputs, against the prior
``p(U) = MN(m(Z), K_ZZ, Sigma)``. ``K_ZZ`` always includes a small relative
jitter on its diagonal, so the prior and the predictive equations agree on
exactly one matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .diffmath import DTYPE, ShapeMismatch, as_tensor, cholesky, value

DimensionMismatch = ShapeMismatch


class _ClampCounter:
    """Counts predictive variances clamped from slightly negative round-off."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


variance_clamps = _ClampCounter()


@dataclass
class KernelHyper:
    log_signal_std: torch.Tensor
    log_length_scales: torch.Tensor

    @classmethod
    def create(cls, signal_std=1.0, length_scales=(1.0,), requires_grad=True):
        ls = np.atleast_1d(np.asarray(length_scales, dtype=float))
        if signal_std <= 0 or np.any(ls <= 0):
            raise ValueError("kernel hyperparameters must be strictly positive")
        return cls(value(math.log(signal_std), requires_grad), value(np.log(ls), requires_grad))

    @property
    def signal_std(self):
        return self.log_signal_std.exp()

    @property
    def length_scales(self):
        return self.log_length_scales.exp()

    def parameters(self):
        return [self.log_signal_std, self.log_length_scales]


@dataclass
class AffineMean:
    H: torch.Tensor
    b: torch.Tensor

    @classmethod
    def create(cls, H, b, requires_grad=True):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        if H.shape[0] != b.shape[0]:
            raise DimensionMismatch(f"H has {H.shape[0]} rows but b has length {b.shape[0]}")
        return cls(value(H, requires_grad), value(b, requires_grad))

    def __call__(self, x):
        return affine_mean(x, self)

    def parameters(self):
        return [self.H, self.b]


def se_ard_gram(X, X2, hyper: KernelHyper):
    """Gram matrix k(X, X2); leading batch dims of X and X2 broadcast."""
    X, X2 = as_tensor(X), as_tensor(X2)
    ls = hyper.length_scales
    if X.shape[-1] != ls.shape[-1] or X2.shape[-1] != ls.shape[-1]:
        raise DimensionMismatch(
            f"inputs of dim {X.shape[-1]}/{X2.shape[-1]} vs {ls.shape[-1]} length-scales")
    a = X / ls
    b = X2 / ls
    d2 = (a.unsqueeze(-2) - b.unsqueeze(-3)).pow(2).sum(-1)
    return hyper.signal_std.pow(2) * torch.exp(-0.5 * d2)


def se_ard_kernel(x, x2, hyper: KernelHyper):
    """Squared-exponential ARD covariance between two single points."""
    x, x2 = as_tensor(x).reshape(-1), as_tensor(x2).reshape(-1)
    if x.shape != x2.shape:
        raise DimensionMismatch(f"point dims differ: {x.shape[0]} vs {x2.shape[0]}")
    return se_ard_gram(x[None], x2[None], hyper)[0, 0]


def affine_mean(x, mean: AffineMean):
    x = as_tensor(x)
    if x.shape[-1] != mean.H.shape[-1]:
        raise DimensionMismatch(f"input dim {x.shape[-1]} vs H with {mean.H.shape[-1]} columns")
    return x @ mean.H.transpose(-1, -2) + mean.b


class SparseGPMode:
    """One GP expert with its variational inducing-output posterior.

    Trainable tensors: Z, A, S_chol (lower-triangular part used), log_Sigma,
    log_noise (process-noise variances), kernel logs, mean H and b.
    """

    def __init__(self, Z, A, S_chol, kernel: KernelHyper, mean: AffineMean,
                 log_Sigma=None, log_noise=None, jitter: float = 1e-6, requires_grad=True):
        self.Z = value(Z, requires_grad) if not isinstance(Z, torch.Tensor) else Z
        self.A = value(A, requires_grad) if not isinstance(A, torch.Tensor) else A
        self.S_chol = value(S_chol, requires_grad) if not isinstance(S_chol, torch.Tensor) else S_chol
        M, P = self.Z.shape
        Q = self.A.shape[1]
        if self.A.shape[0] != M or self.S_chol.shape != (M, M):
            raise DimensionMismatch("Z, A and S_chol disagree on the number of inducing points")
        if mean.H.shape != (Q, P) or kernel.log_length_scales.shape[-1] != P:
            raise DimensionMismatch("mean/kernel shapes inconsistent with Z and A")
        if log_Sigma is None:
            log_Sigma = np.zeros(Q)
        if log_noise is None:
            log_noise = np.full(Q, math.log(1e-2))
        self.log_Sigma = value(log_Sigma, requires_grad) if not isinstance(log_Sigma, torch.Tensor) else log_Sigma
        self.log_noise = value(log_noise, requires_grad) if not isinstance(log_noise, torch.Tensor) else log_noise
        self.kernel = kernel
        self.mean = mean
        self.jitter = jitter

    @property
    def M(self):
        return self.Z.shape[0]

    @property
    def P(self):
        return self.Z.shape[1]

    @property
    def Q(self):
        return self.A.shape[1]

    @property
    def Sigma(self):
        return self.log_Sigma.exp()

    @property
    def noise_var(self):
        return self.log_noise.exp()

    @property
    def S(self):
        Ls = torch.tril(self.S_chol)
        return Ls @ Ls.T

    def kzz(self):
        K = se_ard_gram(self.Z, self.Z, self.kernel)
        if self.jitter:
            K = K + self.jitter * self.kernel.signal_std.pow(2) * torch.eye(self.M, dtype=DTYPE)
        return K

    def parameters(self):
        return [self.Z, self.A, self.S_chol, self.log_Sigma, self.log_noise,
                *self.kernel.parameters(), *self.mean.parameters()]

    def named_arrays(self):
        return {
            "Z": self.Z, "A": self.A, "S_chol": self.S_chol, "log_Sigma": self.log_Sigma,
            "log_noise": self.log_noise, "log_signal_std": self.kernel.log_signal_std,
            "log_length_scales": self.kernel.log_length_scales, "H": self.mean.H, "b": self.mean.b,
        }

    @classmethod
    def from_arrays(cls, arrays, jitter=1e-6, requires_grad=True):
        kern = KernelHyper(value(arrays["log_signal_std"], requires_grad),
                           value(arrays["log_length_scales"], requires_grad))
        mean = AffineMean(value(arrays["H"], requires_grad), value(arrays["b"], requires_grad))
        return cls(arrays["Z"], arrays["A"], arrays["S_chol"], kern, mean,
                   arrays["log_Sigma"], arrays["log_noise"], jitter=jitter, requires_grad=requires_grad)

    @classmethod
    def initialize(cls, Z, Q, signal_std=1.0, length_scales=None, H=None, b=None,
                   S_scale=1.0, Sigma=1.0, noise_var=1e-2, jitter=1e-6):
        """Mode whose posterior starts at ``A = m(Z)`` and ``S = S_scale**2 * K_ZZ``."""
        Z = np.asarray(Z, dtype=float)
        P = Z.shape[1]
        ls = np.ones(P) if length_scales is None else length_scales
        kern = KernelHyper.create(signal_std, ls)
        mean = AffineMean.create(np.zeros((Q, P)) if H is None else H, np.zeros(Q) if b is None else b)
        with torch.no_grad():
            Zt = as_tensor(Z)
            A = affine_mean(Zt, mean).numpy().copy()
            K = se_ard_gram(Zt, Zt, kern) + jitter * signal_std ** 2 * torch.eye(len(Z), dtype=DTYPE)
            Ls = (S_scale * cholesky(K)).numpy().copy()
        return cls(Z, A, Ls, kern, mean, np.full(Q, math.log(Sigma)),
                   np.full(Q, math.log(noise_var)), jitter=jitter)


@dataclass
class GPPosterior:
    """Quantities reused by every prediction from one mode (or a stack of modes).

    alpha = K^-1 (A - m(Z)); B = K^-1 (K - S) K^-1.
    """
    Z: torch.Tensor
    alpha: torch.Tensor
    B: torch.Tensor
    signal_var: torch.Tensor
    log_length_scales: torch.Tensor
    H: torch.Tensor
    b: torch.Tensor
    Sigma: torch.Tensor
    noise_var: torch.Tensor


def posterior(mode: SparseGPMode) -> GPPosterior:
    K = mode.kzz()
    Lk = cholesky(K, retry_jitter=1e-4)
    D = mode.A - affine_mean(mode.Z, mode.mean)
    alpha = torch.cholesky_solve(D, Lk)
    Kinv = torch.cholesky_inverse(Lk)
    W = torch.cholesky_solve(torch.tril(mode.S_chol), Lk)
    B = Kinv - W @ W.T
    return GPPosterior(mode.Z, alpha, B, mode.kernel.signal_std.pow(2), mode.kernel.log_length_scales,
                       mode.mean.H, mode.mean.b, mode.Sigma, mode.noise_var)


def _pad(post: GPPosterior, M: int) -> GPPosterior:
    # padded inducing points carry zero alpha rows and zero B rows/cols, so they drop out exactly
    extra = M - post.Z.shape[0]
    if extra == 0:
        return post
    f = torch.nn.functional.pad
    return GPPosterior(f(post.Z, (0, 0, 0, extra)), f(post.alpha, (0, 0, 0, extra)),
                       f(post.B, (0, extra, 0, extra)), post.signal_var, post.log_length_scales,
                       post.H, post.b, post.Sigma, post.noise_var)


def stack_posteriors(posts: list[GPPosterior]) -> GPPosterior:
    M = max(p.Z.shape[0] for p in posts)
    posts = [_pad(p, M) for p in posts]
    return GPPosterior(*[torch.stack([getattr(p, f) for p in posts])
                         for f in GPPosterior.__dataclass_fields__])


def posterior_moments(x, post: GPPosterior, count_clamps: bool = True):
    """Predictive (mean, variance factor) at inputs ``x`` of shape (..., P).

    For a stacked posterior with leading mode dim L, ``x`` of shape (B, P)
    yields means (L, B, Q) and variances (L, B).
    """
    x = as_tensor(x)
    ls = post.log_length_scales.exp()
    stacked = post.Z.dim() == 3
    if stacked:
        a = x.unsqueeze(0) / ls[:, None, :]
        z = post.Z / ls[:, None, :]
        d2 = (a.unsqueeze(-2) - z.unsqueeze(-3)).pow(2).sum(-1)
        k = post.signal_var[:, None, None] * torch.exp(-0.5 * d2)
        m = x.unsqueeze(0) @ post.H.transpose(-1, -2) + post.b[:, None, :]
        r = m + k @ post.alpha
        v = post.signal_var[:, None] - ((k @ post.B) * k).sum(-1)
    else:
        a = x / ls
        z = post.Z / ls
        d2 = (a.unsqueeze(-2) - z).pow(2).sum(-1)
        k = post.signal_var * torch.exp(-0.5 * d2)
        m = x @ post.H.T + post.b
        r = m + k @ post.alpha
        v = post.signal_var - ((k @ post.B) * k).sum(-1)
    if count_clamps:
        n_neg = int((v.detach() < 0).sum())
        if n_neg:
            variance_clamps.count += n_neg
    return r, v.clamp_min(0.0)


def predict_moments(x, mode: SparseGPMode):
    """Mean r~(x) (Q,) and variance factor v~(x) for a single input point."""
    x = as_tensor(x)
    if x.shape[-1] != mode.P:
        raise DimensionMismatch(f"input dim {x.shape[-1]} vs mode input dim {mode.P}")
    single = x.dim() == 1
    r, v = posterior_moments(x.reshape(-1, mode.P), posterior(mode))
    return (r[0], v[0]) if single else (r, v)


def sample_function_value(x, mode: SparseGPMode, draw):
    """Reparameterized draw of f(x) ~ N(r~(x), v~(x) Sigma)."""
    r, v = predict_moments(x, mode)
    draw = as_tensor(draw)
    std = v.clamp_min(1e-300).sqrt()
    return r + std.unsqueeze(-1) * mode.Sigma.sqrt() * draw


def matrix_normal_kl(mode: SparseGPMode):
    """Closed-form KL(MN(A, S, Sigma) || MN(m(Z), K_ZZ, Sigma))."""
    K = mode.kzz()
    Lk = cholesky(K, retry_jitter=1e-4)
    Ls = torch.tril(mode.S_chol)
    M, Q = mode.M, mode.Q
    D = mode.A - affine_mean(mode.Z, mode.mean)
    # tr(K^-1 S) = ||Lk^-1 Ls||_F^2
    LkiLs = torch.linalg.solve_triangular(Lk, Ls, upper=False)
    tr_term = LkiLs.pow(2).sum()
    LkiD = torch.linalg.solve_triangular(Lk, D, upper=False)
    maha = (LkiD.pow(2) / mode.Sigma).sum()
    logdet_K = 2.0 * torch.log(torch.diagonal(Lk)).sum()
    logdet_S = 2.0 * torch.log(torch.diagonal(Ls).abs()).sum()
    return 0.5 * (Q * tr_term + maha - M * Q + Q * (logdet_K - logdet_S))
