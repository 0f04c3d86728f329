"""Ground-truth trajectory generators.

``simulate_dubins`` is the three-primitive Dubins vehicle used for system
identification; ``simulate_surrogate_modes`` produces planar maneuvers with
a (p, v, a) ground truth, and ``simulate_vertical_profiles`` 1-D climb/level
profiles, both standing in for flight-simulator data.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidManeuverSpec(ValueError):
    pass


@dataclass
class TrajectoryBatch:
    """N observation sequences sharing time stamps.

    ``labels`` and ``states`` hold ground truth for evaluation only.
    """
    y: np.ndarray
    t: np.ndarray
    units: tuple = ("m", "m")
    labels: np.ndarray | None = None
    states: np.ndarray | None = None

    @property
    def N(self):
        return self.y.shape[0]

    @property
    def T(self):
        return self.y.shape[1]

    @property
    def obs_dim(self):
        return self.y.shape[2]

    def subset(self, idx):
        return TrajectoryBatch(self.y[idx], self.t, self.units,
                               None if self.labels is None else self.labels[idx],
                               None if self.states is None else self.states[idx])


@dataclass
class DubinsConfig:
    V: float = 1.0
    controls: tuple = (-1.0, 0.0, 1.0)
    process_noise_std: float = float(np.sqrt(0.1))
    obs_noise_std: float = float(np.sqrt(0.1))
    dt: float = 0.1
    T: int = 20
    N_train: int = 50
    N_test: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.process_noise_std < 0 or self.obs_noise_std < 0:
            raise ValueError("noise standard deviations must be non-negative")
        if self.T < 2:
            raise ValueError("T must be at least 2")


def dubins_rollout(x0, theta0, u, steps, dt=0.1, V=1.0, heading_noise=None):
    """Euler-integrate the Dubins vehicle; returns (steps+1, 3) rows of (px, py, theta).

    ``heading_noise`` (steps,) is added to the turn rate before the Euler step.
    """
    out = np.empty((steps + 1, 3))
    out[0] = (x0[0], x0[1], theta0)
    for k in range(steps):
        px, py, th = out[k]
        rate = u + (0.0 if heading_noise is None else heading_noise[k])
        out[k + 1] = (px + dt * V * np.cos(th), py + dt * V * np.sin(th), th + dt * rate)
    return out


def simulate_dubins(cfg: DubinsConfig, n: int | None = None, rng=None) -> TrajectoryBatch:
    """Sub-trajectories with one constant control each, starting at the origin."""
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    n = cfg.N_train if n is None else n
    controls = np.asarray(cfg.controls, dtype=float)
    labels = rng.integers(0, len(controls), n)
    headings = rng.uniform(0.0, 2.0 * np.pi, n)
    states = np.empty((n, cfg.T, 3))
    for i in range(n):
        noise = cfg.process_noise_std * rng.standard_normal(cfg.T - 1)
        states[i] = dubins_rollout((0.0, 0.0), headings[i], controls[labels[i]], cfg.T - 1,
                                   cfg.dt, cfg.V, noise)
    y = states[:, :, :2] + cfg.obs_noise_std * rng.standard_normal((n, cfg.T, 2))
    return TrajectoryBatch(y, np.arange(cfg.T) * cfg.dt, ("m", "m"), labels, states)


def dubins_datasets(cfg: DubinsConfig):
    """(train, test) batches drawn from one seeded stream."""
    rng = np.random.default_rng(cfg.seed)
    train = simulate_dubins(cfg, cfg.N_train, rng)
    test = simulate_dubins(cfg, cfg.N_test, rng)
    return train, test


def dubins_latent_states(states, V=1.0):
    """(px, py, theta) rows -> canonical (px, py, vx, vy)."""
    th = states[..., 2]
    return np.stack([states[..., 0], states[..., 1], V * np.cos(th), V * np.sin(th)], axis=-1)


MANEUVER_KINDS = ("straight", "turn", "accelerate")


@dataclass
class SurrogateConfig:
    maneuvers: list = field(default_factory=lambda: [
        {"kind": "turn", "rate": -0.05}, {"kind": "straight"}, {"kind": "turn", "rate": 0.05}])
    weights: tuple | None = None
    speed: float = 60.0
    dt: float = 2.0
    T: int = 20
    N: int = 100
    obs_noise_std: float = 30.0
    seed: int = 0


def _check_maneuvers(maneuvers):
    if len(maneuvers) < 2:
        raise InvalidManeuverSpec("need at least two maneuvers")
    for m in maneuvers:
        kind = m.get("kind")
        if kind not in MANEUVER_KINDS:
            raise InvalidManeuverSpec(f"unknown maneuver kind {kind!r}")
        if kind == "turn" and "rate" not in m:
            raise InvalidManeuverSpec("turn maneuver needs a 'rate'")
        if kind == "accelerate" and "accel" not in m:
            raise InvalidManeuverSpec("accelerate maneuver needs an 'accel'")


def maneuver_states(m, p0, v0, t):
    """Exact (p, v, a) at times ``t`` for one maneuver; returns (len(t), 6)."""
    p0, v0 = np.asarray(p0, float), np.asarray(v0, float)
    kind = m["kind"]
    if kind == "turn" and m["rate"] != 0.0:
        w = float(m["rate"])
        c, s = np.cos(w * t), np.sin(w * t)
        v = np.stack([c * v0[0] - s * v0[1], s * v0[0] + c * v0[1]], axis=-1)
        # integral of R(w t) v0 dt
        ic, is_ = np.sin(w * t) / w, (1.0 - np.cos(w * t)) / w
        p = p0 + np.stack([ic * v0[0] - is_ * v0[1], is_ * v0[0] + ic * v0[1]], axis=-1)
        a = w * np.stack([-v[:, 1], v[:, 0]], axis=-1)
    elif kind == "accelerate":
        acc = float(m["accel"]) * v0 / np.linalg.norm(v0)
        v = v0 + t[:, None] * acc
        p = p0 + t[:, None] * v0 + 0.5 * t[:, None] ** 2 * acc
        a = np.broadcast_to(acc, v.shape).copy()
    else:
        v = np.broadcast_to(v0, (len(t), 2)).copy()
        p = p0 + t[:, None] * v0
        a = np.zeros_like(v)
    return np.concatenate([p, v, a], axis=1)


def simulate_surrogate_modes(cfg: SurrogateConfig) -> TrajectoryBatch:
    """Planar constant-maneuver trajectories; states are exact (p, v, a) rows."""
    _check_maneuvers(cfg.maneuvers)
    rng = np.random.default_rng(cfg.seed)
    L = len(cfg.maneuvers)
    w = np.full(L, 1.0 / L) if cfg.weights is None else np.asarray(cfg.weights, float)
    if len(w) != L or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise InvalidManeuverSpec("weights must be a probability vector over maneuvers")
    labels = rng.choice(L, size=cfg.N, p=w)
    t = np.arange(cfg.T) * cfg.dt
    states = np.empty((cfg.N, cfg.T, 6))
    for i in range(cfg.N):
        h = rng.uniform(0, 2 * np.pi)
        v0 = cfg.speed * np.array([np.cos(h), np.sin(h)])
        states[i] = maneuver_states(cfg.maneuvers[labels[i]], (0.0, 0.0), v0, t)
    y = states[:, :, :2] + cfg.obs_noise_std * rng.standard_normal((cfg.N, cfg.T, 2))
    return TrajectoryBatch(y, t, ("m", "m"), labels, states)


def simulate_vertical_profiles(N=100, T=20, dt=2.0, climb_rate=5.0, ramp=10.0,
                               obs_noise_std=45.0, seed=0) -> TrajectoryBatch:
    """Altitude-only profiles: level flight or a climb/descent that ramps to ``climb_rate``.

    States are (h, h', h'') rows, suitable for an order-3, one-dimensional layout.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(T) * dt
    labels = rng.integers(0, 3, N)
    states = np.zeros((N, T, 3))
    for i in range(N):
        sign = (0.0, 1.0, -1.0)[labels[i]]
        t0 = rng.uniform(0, t[-1])
        acc = np.where((t >= t0) & (t < t0 + ramp), sign * climb_rate / ramp, 0.0)
        vel = np.concatenate([[0.0], np.cumsum(acc[:-1] * dt)])
        pos = np.concatenate([[0.0], np.cumsum(vel[:-1] * dt)])
        states[i] = np.stack([pos, vel, acc], axis=1)
    y = states[:, :, :1] + obs_noise_std * rng.standard_normal((N, T, 1))
    return TrajectoryBatch(y, t, ("m",), labels, states)
