"""Held-out metrics: open-loop reconstruction, RMSE, predictive log-likelihood,
MI reporting and the long-horizon prediction protocol."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import ssm
from .diffmath import DTYPE, ShapeMismatch
from .objective import MIDraws, Priors, mi_bound
from .simulators import dubins_rollout


class LengthMismatch(ShapeMismatch):
    pass


@dataclass
class Reconstruction:
    samples: np.ndarray  # (S, T, D) noise-free observation means per sample
    mean: np.ndarray     # (T, D)
    std: np.ndarray      # (T, D)
    states: np.ndarray   # (S, T, state_dim)
    codes: np.ndarray    # (S,)


def reconstruct(y, model: ssm.MultiModalSSM, nets, S: int = 30, rng=None) -> Reconstruction:
    """Open-loop rollouts from (x_1, c) drawn from the inference networks.

    No filtering: after the initial draw the observations are not used again.
    """
    rng = np.random.default_rng(rng)
    y = np.asarray(y, dtype=float)
    T = y.shape[0]
    yt = torch.as_tensor(y)[None]
    with torch.no_grad():
        mu, var = nets.encode(yt)
        probs = nets.code_probs(yt.expand(S, -1, -1), rng.uniform(0, 2 * np.pi, S)).numpy()
        x1 = mu + var.sqrt() * torch.as_tensor(rng.standard_normal((S, model.state_dim)))
        codes = np.array([rng.choice(model.L, p=p / p.sum()) for p in probs])
        path = ssm.sample_code_path(codes, model.P, T - 1, rng)
        w = torch.nn.functional.one_hot(torch.as_tensor(path), model.L).to(DTYPE)
        eps = torch.as_tensor(rng.standard_normal((S, T - 1, model.layout.gp_output_dim)))
        states = ssm.rollout(x1, w, eps, model)
        obs = model.obs.mean(states).numpy()
    return Reconstruction(obs, obs.mean(0), obs.std(0), states.numpy(), codes)


def _check_aligned(a, b):
    if a.shape != b.shape:
        raise LengthMismatch(f"reconstruction shape {a.shape} does not match truth {b.shape}")


def rmse(reconstructions, truth) -> float:
    """Root mean squared error of mean reconstructions over all trajectories, times and dims."""
    rec = np.asarray(reconstructions, dtype=float)
    truth = np.asarray(truth, dtype=float)
    _check_aligned(rec, truth)
    return float(np.sqrt(np.mean((rec - truth) ** 2)))


def log_likelihood(samples, truth, obs_noise_var) -> float:
    """Mean over trajectories of log (1/S) sum_s N(y | sample_s, R).

    ``samples`` is (N, S, T, D) or (S, T, D); ``truth`` (N, T, D) or (T, D).
    """
    s = np.asarray(samples, dtype=float)
    y = np.asarray(truth, dtype=float)
    if s.ndim == 3:
        s, y = s[None], y[None]
    _check_aligned(s[:, 0], y)
    R = np.broadcast_to(np.asarray(obs_noise_var, dtype=float), (y.shape[-1],))
    lp = -0.5 * (np.log(2 * np.pi * R) + (s - y[:, None]) ** 2 / R).sum(axis=(2, 3))
    m = lp.max(axis=1, keepdims=True)
    per = m[:, 0] + np.log(np.mean(np.exp(lp - m), axis=1))
    return float(per.mean())


@dataclass
class EvalReport:
    rmse: float
    mean_log_likelihood: float
    mi: float
    rows: list = field(default_factory=list)  # (index, rmse, log_likelihood, code)

    def __post_init__(self):
        if not self.rmse >= 0:
            raise ValueError("rmse must be non-negative")

    def lines(self):
        out = [f"rmse\t{self.rmse:.6f}", f"mean_log_likelihood\t{self.mean_log_likelihood:.6f}",
               f"mi\t{self.mi:.6f}", "traj\trmse\tlog_likelihood\tcode"]
        out += [f"{i}\t{r:.6f}\t{ll:.6f}\t{c}" for i, r, ll, c in self.rows]
        return out


def report_mi(model, nets, y, priors: Priors | None = None, n: int = 500, rng=None,
              obs_noise: bool = False) -> float:
    """MI lower bound with initial states drawn from the encoder posterior of ``y``."""
    rng = np.random.default_rng(rng)
    priors = priors or Priors.default(model.layout, model.L)
    y = torch.as_tensor(np.asarray(y, dtype=float))
    N, T, D = y.shape
    draws = MIDraws.sample(rng, n, T, model.state_dim, model.layout.gp_output_dim, D, priors,
                           model.P, pool_size=N)
    with torch.no_grad():
        mu, var = nets.encode(y)
        return float(mi_bound(model, nets, priors, draws, (mu, var), obs_noise))


def evaluate(model, nets, y, S: int = 30, rng=None, priors=None, mi_samples: int = 500,
             keep_samples: bool = False):
    """EvalReport over a test set ``y`` (N, T, D)."""
    rng = np.random.default_rng(rng)
    y = np.asarray(y, dtype=float)
    recs = [reconstruct(y[n], model, nets, S, rng) for n in range(len(y))]
    means = np.stack([r.mean for r in recs])
    samples = np.stack([r.samples for r in recs])
    R = model.obs.noise_var.detach().numpy()
    rows = []
    for n, r in enumerate(recs):
        code = int(np.bincount(r.codes, minlength=model.L).argmax())
        rows.append((n, rmse(r.mean, y[n]), log_likelihood(r.samples, y[n], R), code))
    report = EvalReport(rmse(means, y), log_likelihood(samples, y, R),
                        report_mi(model, nets, y, priors, mi_samples, rng), rows)
    if keep_samples:
        return report, recs
    return report


def plot_rows(rec: Reconstruction, truth, dt: float = 1.0):
    """(t, truth..., mean..., lower..., upper...) rows with a +-2 std band."""
    truth = np.asarray(truth, dtype=float)
    _check_aligned(rec.mean, truth)
    t = np.arange(len(truth)) * dt
    return np.column_stack([t, truth, rec.mean, rec.mean - 2 * rec.std, rec.mean + 2 * rec.std])


def heading_change(xy) -> float:
    """Net unwrapped heading change along a planar path."""
    d = np.diff(np.asarray(xy, dtype=float), axis=0)
    ang = np.unwrap(np.arctan2(d[:, 1], d[:, 0]))
    return float(ang[-1] - ang[0])


@dataclass
class ModePrediction:
    control: float
    code: int
    truth: np.ndarray      # (steps + 1, 2)
    predicted: np.ndarray  # (steps + 1, 2)
    heading_change: float
    terminal_error: float

    @property
    def sign_ok(self):
        return _sign_matches(self.heading_change, self.control)


STRAIGHT_TOLERANCE = 0.5  # rad of net heading change still counted as "no turn"


def _sign_matches(dtheta, u):
    if u == 0:
        return abs(dtheta) < STRAIGHT_TOLERANCE
    return math.copysign(1.0, dtheta) == math.copysign(1.0, u) and abs(dtheta) >= STRAIGHT_TOLERANCE


def long_term_prediction(model, nets, steps: int = 100, warmup: int = 20, controls=(-1.0, 0.0, 1.0),
                         dt: float = 0.1, V: float = 1.0, rng=None):
    """Per-control long-horizon prediction from x_1 = [0, 0, V, 0].

    The code and initial state are inferred from the first ``warmup`` noise-free
    observations; the chosen expert's mean dynamics then run ``steps`` steps.
    """
    rng = np.random.default_rng(rng)
    out = []
    for u in controls:
        truth = dubins_rollout((0.0, 0.0), 0.0, u, steps, dt, V)[:, :2]
        yw = torch.as_tensor(truth[:warmup])[None]
        with torch.no_grad():
            mu, _ = nets.encode(yw)
            probs = nets.code_probs(yw.expand(64, -1, -1), rng.uniform(0, 2 * np.pi, 64)).mean(0)
            code = int(probs.argmax())
            w = torch.zeros(1, steps, model.L, dtype=DTYPE)
            w[..., code] = 1.0
            eps = torch.zeros(1, steps, model.layout.gp_output_dim, dtype=DTYPE)
            states = ssm.rollout(mu, w, eps, model, noise=False)
            pred = model.obs.mean(states)[0].numpy()
        out.append(ModePrediction(u, code, truth, pred, heading_change(pred),
                                  float(np.linalg.norm(pred[-1] - truth[-1]))))
    return out


def tracking_errors(y, model, nets, true_positions, K: int = 512, P=None, rng=None, S: int = 30):
    """Per-window (tracked, open-loop) mean position errors against ``true_positions``."""
    from .filtering import track

    rng = np.random.default_rng(rng)
    y = np.asarray(y, dtype=float)
    truth = np.asarray(true_positions, dtype=float)
    idx = list(model.obs.indices)
    out = []
    for n in range(len(y)):
        res = track(y[n], model, nets, K, rng, P)
        tracked = np.linalg.norm(res.means[:, idx] - truth[n], axis=1).mean()
        rec = reconstruct(y[n], model, nets, S, rng)
        open_loop = np.linalg.norm(rec.mean - truth[n], axis=1).mean()
        out.append((tracked, open_loop))
    return np.array(out)


__all__ = ["LengthMismatch", "Reconstruction", "reconstruct", "rmse", "log_likelihood", "EvalReport",
           "report_mi", "evaluate", "plot_rows", "heading_change", "ModePrediction",
           "long_term_prediction", "tracking_errors"]
