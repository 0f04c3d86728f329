"""Training objectives and the InfoSSM training loop.

``mco`` is the K-sample importance-weighted bound on log p(y) minus the
inducing-output KL; ``mi_bound`` is the variational lower bound on the
mutual information between the code and generated trajectories (entropy of
the fixed code prior omitted); ``info_loss`` adds them with weight lambda.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.mixture import GaussianMixture
import torch

from . import gp, ssm
from .diffmath import DTYPE, Adam, NotPositiveDefinite, as_tensor, gradient, log_mean_exp
from .inference import GumbelConfig, InferenceNets, gaussian_log_density, sample_code

log = logging.getLogger(__name__)


class NonFiniteObjective(FloatingPointError):
    def __init__(self, message, index=None, result=None):
        super().__init__(message)
        self.index = index
        self.result = result


@dataclass
class Priors:
    """p(x_1) as a diagonal Gaussian and the fixed categorical p(c_1).

    With ``shifted`` the Gaussian is over x_1 expressed relative to the first
    observation of its trajectory (observed slots only are shifted).
    """
    x1_mean: np.ndarray
    x1_var: np.ndarray
    c1_probs: np.ndarray
    shifted: bool = True

    def __post_init__(self):
        self.x1_mean = np.asarray(self.x1_mean, dtype=float)
        self.x1_var = np.asarray(self.x1_var, dtype=float)
        self.c1_probs = np.asarray(self.c1_probs, dtype=float)
        if np.any(self.x1_var <= 0):
            raise ValueError("prior variances must be positive")

    @classmethod
    def default(cls, layout: ssm.CanonicalLayout, L: int, position_std=1.0, other_std=10.0):
        std = np.full(layout.state_dim, other_std)
        std[list(layout.position_indices)] = position_std
        return cls(np.zeros(layout.state_dim), std ** 2, np.full(L, 1.0 / L))


@dataclass
class TrainingConfig:
    K: int = 4
    L: int = 3
    lam: float = 0.0
    T: int = 20
    M: int = 20
    epochs: int = 1500
    batch_size: int | None = None
    seed: int = 0
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mi_samples: int = 60
    mi_init: str = "posterior"
    mi_obs_noise: bool = False
    gumbel: GumbelConfig = field(default_factory=GumbelConfig)
    hidden: int = 32
    classifier_hidden: int = 64
    signal_std: float = 0.5
    process_noise_init: float = 0.1
    mean_init_std: float = 0.5
    mean_init: str = "mixture"
    trainable_obs_noise: bool = True
    trainable_P: bool = False
    P_stay: float = 1.0

    def __post_init__(self):
        if self.K < 1 or self.lam < 0 or self.T < 2 or self.L < 1 or self.M < 1:
            raise ValueError("need K >= 1, lam >= 0, T >= 2, L >= 1, M >= 1")
        if self.mi_init not in ("prior", "posterior"):
            raise ValueError("mi_init must be 'prior' or 'posterior'")
        if self.mean_init not in ("mixture", "random"):
            raise ValueError("mean_init must be 'mixture' or 'random'")
        if isinstance(self.gumbel, dict):
            self.gumbel = GumbelConfig(**self.gumbel)

    def to_dict(self):
        return asdict(self)


@dataclass
class MCODraws:
    """All randomness consumed by one MCO evaluation."""
    x1: np.ndarray           # (N, K, S) standard normal
    code_uniform: np.ndarray  # (N, K, L) uniform
    process: np.ndarray      # (N, K, T-1, Q) standard normal
    angles: np.ndarray       # (N,) classifier rotation angles
    path_uniform: np.ndarray  # (N, K, T-2) uniform, used only for non-identity P

    @classmethod
    def sample(cls, rng, N, K, T, S, L, Q, rotate=True):
        rng = np.random.default_rng(rng)
        return cls(rng.standard_normal((N, K, S)), rng.random((N, K, L)),
                   rng.standard_normal((N, K, T - 1, Q)),
                   rng.uniform(0, 2 * np.pi, N) if rotate else np.zeros(N),
                   rng.random((N, K, max(T - 2, 0))))


def code_paths(c1, P: np.ndarray, u):
    """Code sequences (len 1 + u.shape[-1]) from initial codes and uniforms via inverse CDF."""
    c1 = np.asarray(c1, dtype=int)
    path = np.empty(c1.shape + (u.shape[-1] + 1,), dtype=int)
    path[..., 0] = c1
    if np.array_equal(P, np.eye(len(P))):
        path[..., 1:] = c1[..., None]
        return path
    cdf = np.cumsum(P, axis=1)
    for t in range(u.shape[-1]):
        nxt = (u[..., t, None] > cdf[path[..., t]]).sum(-1)
        path[..., t + 1] = np.minimum(nxt, len(P) - 1)
    return path


def _x1_offset(y, nets_or_indices, state_dim):
    idx = nets_or_indices
    off = torch.zeros(y.shape[0], state_dim, dtype=DTYPE)
    off[:, list(idx)] = y[:, 0, :]
    return off


def log_weights(y, model: ssm.MultiModalSSM, nets, priors: Priors, draws: MCODraws,
                tau: float = 1.0, straight_through: bool = True, post=None):
    """Per-sample log importance weights (N, K) plus intermediate quantities."""
    y = as_tensor(y)
    N, T, _ = y.shape
    K = draws.x1.shape[1]
    S, L = model.state_dim, model.L
    mu, var = nets.encode(y)
    logq_c = nets.code_log_probs(y, torch.as_tensor(draws.angles, dtype=DTYPE))
    eps = as_tensor(draws.x1)
    x1 = mu[:, None, :] + var.sqrt()[:, None, :] * eps
    log_qx = gaussian_log_density(x1, mu[:, None, :], var[:, None, :])
    x1_rel = x1
    if priors.shifted:
        x1_rel = x1 - _x1_offset(y, model.obs.indices, S)[:, None, :]
    log_px = gaussian_log_density(x1_rel, as_tensor(priors.x1_mean), as_tensor(priors.x1_var))

    lq = logq_c[:, None, :].expand(N, K, L)
    _, hard, st = sample_code(lq, tau, draws.code_uniform, straight_through)
    log_qc = lq.clamp_min(-30.0).gather(-1, hard[..., None])[..., 0]
    log_pc = torch.log(torch.as_tensor(priors.c1_probs, dtype=DTYPE))[hard]

    Pn = model.P.numpy()
    if np.array_equal(Pn, np.eye(L)):
        w = st[:, :, None, :].expand(N, K, T - 1, L)
    else:
        path = torch.as_tensor(code_paths(hard.numpy(), Pn, draws.path_uniform[..., :T - 2]))
        oh = torch.nn.functional.one_hot(path, L).to(DTYPE)
        same = (path == hard[..., None])[..., None]
        w = torch.where(same, st[:, :, None, :].expand_as(oh), oh)
    states = ssm.rollout(x1.reshape(N * K, S), w.reshape(N * K, T - 1, L),
                         as_tensor(draws.process).reshape(N * K, T - 1, -1), model, post)
    states = states.reshape(N, K, T, S)
    log_py = ssm.observation_log_likelihood(y[:, None], states, model.obs).sum(-1)
    lw = log_py + log_px - log_qx + log_pc - log_qc
    return lw, {"mu": mu, "var": var, "states": states, "codes": hard, "log_q_c": logq_c}


def _check_finite(per_traj, offset=0):
    bad = ~torch.isfinite(per_traj.detach())
    if bool(bad.any()):
        i = int(torch.nonzero(bad)[0, 0]) + offset
        raise NonFiniteObjective(f"non-finite objective term for trajectory {i}", index=i)


def mco(y, model, nets, priors, draws: MCODraws, tau: float = 1.0, straight_through=True,
        scale: float = 1.0, return_details: bool = False):
    """Monte Carlo objective: sum_n log mean_k w_nk - sum_l KL(q(U_l) || p(U_l))."""
    lw, det = log_weights(y, model, nets, priors, draws, tau, straight_through)
    per_traj = log_mean_exp(lw, dim=1)
    _check_finite(per_traj)
    kl = model.kl()
    value = scale * per_traj.sum() - kl
    if not torch.isfinite(value):
        raise NonFiniteObjective("non-finite KL term")
    if return_details:
        det.update(log_w=lw, per_trajectory=per_traj, kl=kl)
        return value, det
    return value


def elbo(y, model, nets, priors, draws: MCODraws, tau: float = 1.0, straight_through=True):
    """Single-sample-average ELBO estimator on the same draws as :func:`mco`."""
    lw, _ = log_weights(y, model, nets, priors, draws, tau, straight_through)
    per_traj = lw.mean(dim=1)
    _check_finite(per_traj)
    return per_traj.sum() - model.kl()


@dataclass
class MIDraws:
    codes: np.ndarray       # (n, T-1) code sequences
    x1: np.ndarray          # (n, S) standard normal
    process: np.ndarray     # (n, T-1, Q)
    obs: np.ndarray         # (n, T, D)
    angles: np.ndarray      # (n,)
    pool_index: np.ndarray  # (n,) rows of an initial-state pool (posterior init)

    @classmethod
    def sample(cls, rng, n, T, S, Q, D, priors: Priors, P, pool_size=1, rotate=True):
        rng = np.random.default_rng(rng)
        c1 = rng.choice(len(priors.c1_probs), size=n, p=priors.c1_probs)
        codes = code_paths(c1, P.numpy() if hasattr(P, "numpy") else np.asarray(P),
                           rng.random((n, max(T - 2, 0))))
        return cls(codes, rng.standard_normal((n, S)), rng.standard_normal((n, T - 1, Q)),
                   rng.standard_normal((n, T, D)),
                   rng.uniform(0, 2 * np.pi, n) if rotate else np.zeros(n),
                   rng.integers(0, max(pool_size, 1), n))


def generate_observations(model, x1, codes, process, obs_noise=None):
    """Batched differentiable trajectory generator G(x_1, c_{1:T-1}).

    Process noise always enters through ``process``; observation noise is
    added only when ``obs_noise`` draws are given.
    """
    w = torch.nn.functional.one_hot(torch.as_tensor(codes), model.L).to(DTYPE)
    states = ssm.rollout(x1, w, as_tensor(process), model)
    y = model.obs.mean(states)
    if obs_noise is not None:
        y = y + model.obs.noise_var.sqrt() * as_tensor(obs_noise)
    return y, states


def mi_bound(model, nets, priors: Priors, draws: MIDraws, x1_posterior=None, obs_noise=False):
    """Mean of log q(c_1 | y) over trajectories generated from prior codes.

    Initial states are drawn from p(x_1) placed at the origin, or, when
    ``x1_posterior = (mu, var)`` is given, from the encoder posterior of the
    rows picked by ``draws.pool_index``.
    """
    eps = as_tensor(draws.x1)
    if x1_posterior is not None:
        mu, var = x1_posterior
        idx = torch.as_tensor(draws.pool_index % len(mu))
        x1 = mu[idx] + var[idx].sqrt() * eps
    else:
        x1 = as_tensor(priors.x1_mean) + as_tensor(priors.x1_var).sqrt() * eps
    y, _ = generate_observations(model, x1, draws.codes, draws.process, draws.obs if obs_noise else None)
    logq = nets.code_log_probs(y, torch.as_tensor(draws.angles, dtype=DTYPE))
    c1 = torch.as_tensor(draws.codes[:, 0])
    return logq.gather(-1, c1[:, None])[:, 0].mean()


def info_loss(y, model, nets, priors, draws: MCODraws, lam: float, mi_draws: MIDraws | None = None,
              tau: float = 1.0, straight_through=True, scale: float = 1.0, mi_init="posterior",
              return_parts: bool = False, mi_obs_noise: bool = False):
    """mco + lam * mi_bound (the MI term is skipped entirely when lam == 0)."""
    value, det = mco(y, model, nets, priors, draws, tau, straight_through, scale, return_details=True)
    mi = torch.zeros((), dtype=DTYPE)
    total = value
    if lam > 0:
        if mi_draws is None:
            raise ValueError("lam > 0 needs MI draws")
        post = (det["mu"].detach(), det["var"].detach()) if mi_init == "posterior" else None
        mi = mi_bound(model, nets, priors, mi_draws, post, mi_obs_noise)
        total = value + lam * mi
    if return_parts:
        return total, value, mi
    return total


# --------------------------------------------------------------------------- construction

def _poly_derivatives(y, dt, order, rng, n_points):
    """Derivative estimates (positions, velocities, ...) from per-window polynomial fits."""
    N, T, D = y.shape
    t = np.arange(T) * dt
    deg = min(max(order, 1), T - 1)
    out = np.empty((n_points, order * D))
    resid = []
    for n in range(N):
        coef = np.polyfit(t, y[n], deg)
        resid.append(y[n] - np.stack([np.polyval(coef[:, d], t) for d in range(D)], axis=1))
    picks = rng.integers(0, N, n_points)
    times = rng.uniform(0, t[-1], n_points)
    for i, (n, s) in enumerate(zip(picks, times)):
        coef = np.polyfit(t, y[n], deg)
        for k in range(order):
            dcoef = coef
            for _ in range(k):
                dcoef = np.stack([np.polyder(dcoef[:, d]) for d in range(D)], axis=1) \
                    if dcoef.ndim == 2 else np.polyder(dcoef)
            out[i, k * D:(k + 1) * D] = [np.polyval(dcoef[:, d], s) for d in range(D)]
    noise_var = np.var(np.concatenate(resid), axis=0) * T / max(T - deg - 1, 1)
    return out, noise_var


def _window_derivatives(y, dt, order, times=5, degree=None):
    """GP-input and top-derivative estimates at a few times along each window.

    Returns X (N, times, order*D) holding derivatives 0..order-1 and G
    (N, times, D) holding the order-th derivative of a polynomial fit of
    ``degree`` (default ``order``).
    """
    N, T, D = y.shape
    t = np.arange(T) * dt
    P = np.polynomial.polynomial
    X = np.empty((N, times, order * D))
    G = np.empty((N, times, D))
    for n in range(N):
        c = P.polyfit(t, y[n], order if degree is None else max(degree, order))
        for i, s in enumerate(np.linspace(0.0, t[-1], times)):
            cc = c
            for k in range(order + 1):
                val = P.polyval(s, cc)
                if k < order:
                    X[n, i, k * D:(k + 1) * D] = val
                else:
                    G[n, i] = val
                cc = P.polyder(cc)
    return X, G


def mixture_of_regressions(X, G, L, rng, iters=50, restarts=30):
    """Hard-assignment mixture of L linear maps G ~ X W_l, one label per window.

    Returns (W list of (P, Q) arrays, labels) of the restart with least residual.
    """
    N = X.shape[0]
    best = None
    for _ in range(restarts):
        z = rng.integers(0, L, N)
        for _ in range(iters):
            Ws = []
            for l in range(L):
                sel = z == l
                if not sel.any():
                    sel = rng.random(N) < 1.0 / L
                Ws.append(np.linalg.lstsq(X[sel].reshape(-1, X.shape[-1]),
                                          G[sel].reshape(-1, G.shape[-1]), rcond=None)[0])
            cost = np.stack([((X @ W - G) ** 2).sum((1, 2)) for W in Ws], axis=1)
            znew = cost.argmin(1)
            if np.array_equal(znew, z):
                break
            z = znew
        total = cost.min(1).sum()
        if best is None or total < best[0]:
            best = (total, Ws, z)
    return best[1], best[2]


def velocity_frame_modes(y, dt, L, rng, n_init=50, degree=2):
    """Initial linear maps a = H v for planar order-2 data from clustered turn statistics.

    Each window's fitted acceleration is expressed in its own velocity frame
    (along-track, cross-track); a tied-covariance Gaussian mixture over those
    2-vectors gives one cluster per expert, and H = (a_par I + a_perp J) / |v|
    at the cluster means. Returns (H list of (2, 2) arrays, labels).
    """
    X, G = _window_derivatives(y, dt, 2, degree=degree)
    v = X[..., 2:4]
    speed = np.maximum(np.linalg.norm(v, axis=-1), 1e-9)
    along = ((G * v).sum(-1) / speed).mean(1)
    cross = ((v[..., 0] * G[..., 1] - v[..., 1] * G[..., 0]) / speed).mean(1)
    feats = np.stack([along, cross], axis=1)
    gm = GaussianMixture(L, covariance_type="tied", n_init=n_init,
                         random_state=int(rng.integers(2 ** 31))).fit(feats)
    labels = gm.predict(feats)
    J = np.array([[0.0, -1.0], [1.0, 0.0]])
    Hs = []
    for l in range(L):
        sel = labels == l
        s = speed[sel].mean() if sel.any() else speed.mean()
        a_par, a_perp = gm.means_[l]
        Hs.append((a_par * np.eye(2) + a_perp * J) / s)
    return Hs, labels


def build_model(y, cfg: TrainingConfig, layout: ssm.CanonicalLayout, dt: float,
                rng: np.random.Generator, obs_noise_var=None):
    """Fresh model and inference nets sized for data ``y`` (N, T, D)."""
    y = np.asarray(y, dtype=float)
    feats, noise_est = _poly_derivatives(y, dt, layout.order, rng, cfg.M * cfg.L)
    Zall = feats[:, list(layout.gp_input_indices)]
    Zall = Zall + 0.1 * rng.standard_normal(Zall.shape)
    ls = np.maximum(Zall.std(0), 1e-3)
    Q, Pin = layout.gp_output_dim, layout.gp_input_dim
    planar_velocity = (layout.order == 2 and layout.spatial_dim == 2
                       and tuple(layout.gp_input_indices) == (2, 3) and y.shape[0] >= cfg.L)
    if cfg.mean_init == "mixture" and cfg.L > 1 and planar_velocity:
        Hs, _ = velocity_frame_modes(y, dt, cfg.L, rng)
    elif cfg.mean_init == "mixture" and cfg.L > 1:
        X, G = _window_derivatives(y, dt, layout.order)
        Ws, _ = mixture_of_regressions(X[..., list(layout.gp_input_indices)], G, cfg.L, rng)
        Hs = [W.T + 0.05 * cfg.mean_init_std * rng.standard_normal((Q, Pin)) for W in Ws]
    else:
        # random affine means break the symmetry between otherwise identical experts
        Hs = [cfg.mean_init_std * rng.standard_normal((Q, Pin)) for _ in range(cfg.L)]
    modes = []
    for l in range(cfg.L):
        Z = Zall[l * cfg.M:(l + 1) * cfg.M]
        H = Hs[l]
        modes.append(gp.SparseGPMode.initialize(
            Z, layout.gp_output_dim, signal_std=cfg.signal_std, length_scales=ls, H=H, S_scale=0.3,
            Sigma=1.0, noise_var=cfg.process_noise_init))
    if cfg.P_stay >= 1.0:
        P = ssm.ModeTransitionMatrix(np.eye(cfg.L), trainable=cfg.trainable_P)
    else:
        P = ssm.ModeTransitionMatrix(ssm.ModeTransitionMatrix.sticky(cfg.L, cfg.P_stay).numpy(),
                                     trainable=cfg.trainable_P)
    nv = noise_est if obs_noise_var is None else obs_noise_var
    obs = ssm.ObservationModel(layout.position_indices, np.maximum(nv, 1e-6), layout.state_dim,
                               trainable=cfg.trainable_obs_noise)
    model = ssm.MultiModalSSM(modes, P, obs, layout, dt)
    scale = float(np.std(y - y[:, :1, :])) or 1.0
    nets = InferenceNets(y.shape[2], layout.state_dim, y.shape[1], cfg.L, layout.position_indices,
                         hidden=cfg.hidden, classifier_hidden=cfg.classifier_hidden, obs_scale=scale,
                         dt=dt)
    return model, nets


@dataclass
class TrainResult:
    model: ssm.MultiModalSSM
    nets: InferenceNets
    priors: Priors
    history: list
    config: TrainingConfig


def _snapshot(params):
    return [p.detach().clone() for p in params]


def _restore(params, snap):
    with torch.no_grad():
        for p, s in zip(params, snap):
            p.copy_(s)


def train(y, cfg: TrainingConfig, layout: ssm.CanonicalLayout, dt: float, model=None, nets=None,
          priors: Priors | None = None, log_path=None, callback=None, obs_noise_var=None) -> TrainResult:
    """Maximize the InfoSSM objective with Adam.

    Deterministic for a given ``cfg.seed``. On a non-finite objective the
    parameters are rolled back to the last finite iterate and
    NonFiniteObjective is raised with the partial result attached.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 3 or len(y) == 0:
        raise ValueError("training data must be a non-empty (N, T, D) array")
    if y.shape[1] < cfg.T:
        raise ValueError(f"trajectories of length {y.shape[1]} shorter than T={cfg.T}")
    y = y[:, :cfg.T]
    bad = np.flatnonzero(~np.isfinite(y).all(axis=(1, 2)))
    if len(bad):
        raise ValueError(f"trajectory {bad[0]} contains non-finite observations")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if model is None or nets is None:
        model, nets = build_model(y, cfg, layout, dt, rng, obs_noise_var)
    priors = priors or Priors.default(layout, model.L)
    params = model.parameters() + list(nets.parameters())
    opt = Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps, maximize=True)
    N, T, D = y.shape
    bs = N if not cfg.batch_size else min(cfg.batch_size, N)
    yt = torch.as_tensor(y)
    history = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if fh.tell() == 0:
            writer.writerow(["epoch", "mco", "mi", "wallclock_s"])
    t0 = time.perf_counter()
    result = TrainResult(model, nets, priors, history, cfg)
    try:
        for epoch in range(cfg.epochs):
            tau = cfg.gumbel.temperature_at(epoch)
            order = rng.permutation(N) if bs < N else np.arange(N)
            mco_sum, mi_last = 0.0, 0.0
            for start in range(0, N, bs):
                idx = order[start:start + bs]
                yb = yt[idx]
                draws = MCODraws.sample(rng, len(idx), cfg.K, T, model.state_dim, model.L,
                                        layout.gp_output_dim)
                mi_draws = None
                if cfg.lam > 0:
                    mi_draws = MIDraws.sample(rng, cfg.mi_samples, T, model.state_dim,
                                              layout.gp_output_dim, D, priors, model.P, pool_size=len(idx))
                snap = _snapshot(params)
                try:
                    total, m, mi = info_loss(yb, model, nets, priors, draws, cfg.lam, mi_draws, tau,
                                             cfg.gumbel.straight_through, scale=N / len(idx),
                                             mi_init=cfg.mi_init, return_parts=True,
                                             mi_obs_noise=cfg.mi_obs_noise)
                    grads = gradient(total, params)
                except NonFiniteObjective as exc:
                    exc.index = None if exc.index is None else int(idx[exc.index])
                    raise
                if not all(bool(torch.isfinite(g).all()) for g in grads):
                    raise NonFiniteObjective(f"non-finite gradient at epoch {epoch}")
                opt.step(grads)
                mco_sum += float(m.detach())
                mi_last = float(mi.detach())
            row = {"epoch": epoch, "mco": mco_sum, "mi": mi_last,
                   "wallclock_s": time.perf_counter() - t0}
            history.append(row)
            if writer is not None:
                writer.writerow([row["epoch"], f"{row['mco']:.10g}", f"{row['mi']:.10g}",
                                 f"{row['wallclock_s']:.4f}"])
            if callback is not None:
                callback(row, model, nets)
    except (NonFiniteObjective, NotPositiveDefinite) as exc:
        _restore(params, snap)
        log.warning("training aborted at epoch %d: %s", len(history), exc)
        raise NonFiniteObjective(str(exc), getattr(exc, "index", None), result) from exc
    finally:
        if fh is not None:
            fh.close()
    return result
