"""Differentiable numerical core.

Everything is double precision. Gradients are recorded on torch's autograd
tape; this module wraps the handful of primitives the rest of the package
relies on (jittered Cholesky, scalar-objective gradients, Adam) so that the
contracts they obey live in one place.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

DTYPE = torch.float64

# Value is the carrier for every trainable quantity.
Value = torch.Tensor


class NotPositiveDefinite(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class ShapeMismatch(ValueError):
    pass


def value(data, requires_grad: bool = False) -> Value:
    """Wrap array-like ``data`` as a float64 tensor."""
    t = torch.as_tensor(np.asarray(data, dtype=np.float64)).clone()
    return t.requires_grad_(requires_grad)


def as_tensor(data) -> torch.Tensor:
    if isinstance(data, torch.Tensor):
        return data if data.dtype == DTYPE else data.to(DTYPE)
    return torch.as_tensor(np.asarray(data, dtype=np.float64))


def cholesky(A: torch.Tensor, jitter: float = 0.0, retry_jitter: float | None = None,
             sym_tol: float = 1e-10) -> torch.Tensor:
    """Lower Cholesky factor of a (batch of) symmetric positive-definite matrices.

    ``jitter`` and ``retry_jitter`` are relative: the added diagonal is
    ``jitter * mean(diag(A))``. With ``jitter=0`` the matrix is factorized as
    given. Raises NotPositiveDefinite when every attempt fails.
    """
    A = as_tensor(A)
    if A.shape[-1] != A.shape[-2]:
        raise ShapeMismatch(f"cholesky needs square matrices, got {tuple(A.shape)}")
    with torch.no_grad():
        scale = A.abs().amax(dim=(-2, -1)).clamp_min(1e-300)
        asym = (A - A.transpose(-2, -1)).abs().amax(dim=(-2, -1))
        if bool((asym > sym_tol * scale).any()):
            raise NotPositiveDefinite("matrix is not symmetric")
    eye = torch.eye(A.shape[-1], dtype=A.dtype)
    mean_diag = A.diagonal(dim1=-2, dim2=-1).mean(-1).detach()[..., None, None]
    attempts = [jitter] + ([retry_jitter] if retry_jitter is not None else [])
    for j in attempts:
        B = A + (j * mean_diag) * eye if j else A
        L, info = torch.linalg.cholesky_ex(B)
        if not bool((info != 0).any()) and bool(torch.isfinite(L).all()):
            return L
    raise NotPositiveDefinite(f"Cholesky failed after jitter attempts {attempts}")


def kernel_cholesky(K: torch.Tensor) -> torch.Tensor:
    """Cholesky of a kernel Gram matrix with the standard 1e-6 / 1e-4 jitter ladder."""
    return cholesky(K, jitter=1e-6, retry_jitter=1e-4)


def gradient(objective: torch.Tensor, params: Sequence[torch.Tensor],
             retain_graph: bool = False) -> list[torch.Tensor]:
    """Reverse-mode gradients of a scalar ``objective`` with respect to ``params``.

    Parameters that the objective does not depend on get a zero gradient.
    """
    if not isinstance(objective, torch.Tensor) or objective.numel() != 1:
        raise GraphError("objective must be a scalar tensor")
    if objective.grad_fn is None and not objective.requires_grad:
        raise GraphError("objective was not recorded from any parameter")
    if not torch.isfinite(objective).all():
        raise GraphError("objective is not finite")
    params = list(params)
    grads = torch.autograd.grad(objective.reshape(()), params, retain_graph=retain_graph,
                                allow_unused=True)
    if all(g is None for g in grads):
        raise GraphError("objective was not recorded from the given parameters")
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[torch.Tensor] = field(default_factory=list)
    second_moment: list[torch.Tensor] = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.lr <= 0 or self.epsilon <= 0:
            raise ValueError("Adam lr and epsilon must be positive")


def adam_step(state: AdamState, params: Sequence[torch.Tensor],
              grads: Sequence[torch.Tensor], maximize: bool = False) -> AdamState:
    """One bias-corrected Adam update applied to ``params`` in place.

    Moments are created lazily on the first call. With ``maximize`` the step
    ascends the gradient.
    """
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ShapeMismatch("params and grads differ in length")
    if not state.first_moment:
        state.first_moment = [torch.zeros_like(p, dtype=DTYPE) for p in params]
        state.second_moment = [torch.zeros_like(p, dtype=DTYPE) for p in params]
    if len(state.first_moment) != len(params):
        raise ShapeMismatch("Adam state was built for a different parameter list")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    sign = 1.0 if maximize else -1.0
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
            if g.shape != p.shape or m.shape != p.shape:
                raise ShapeMismatch(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            step = (m / bc1) / ((v / bc2).sqrt() + state.epsilon)
            p.add_(sign * state.lr * step)
    return state


class Adam:
    """Thin stateful wrapper around :func:`adam_step` for a fixed parameter list."""

    def __init__(self, params: Iterable[torch.Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, maximize: bool = False):
        self.params = list(params)
        self.maximize = maximize
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], epsilon=eps)

    def step(self, grads: Sequence[torch.Tensor]) -> None:
        adam_step(self.state, self.params, grads, maximize=self.maximize)


def log_mean_exp(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """log(mean(exp(x))) along ``dim`` with max subtraction."""
    m = x.detach().amax(dim=dim, keepdim=True)
    m = torch.where(torch.isfinite(m), m, torch.zeros_like(m))
    out = m + torch.log(torch.exp(x - m).mean(dim=dim, keepdim=True))
    return out.squeeze(dim)
