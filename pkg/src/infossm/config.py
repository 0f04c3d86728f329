"""Flat ``key = value`` experiment configuration with named profiles.

A document may start with ``profile = <name>``; every other key overrides a
value from that profile. ``#`` starts a comment. ``lambda`` accepts a
number or a multiple of ``NT`` (e.g. ``10NT``), resolved against the data
size at training time.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

from .inference import GumbelConfig
from .objective import TrainingConfig
from .simulators import DubinsConfig, SurrogateConfig
from .ssm import CanonicalLayout


class ConfigError(ValueError):
    pass


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _lam(s):
    s = s.strip().replace(" ", "")
    m = re.fullmatch(r"([0-9.eE+-]*)\*?NT", s)
    if m:
        return f"{float(m.group(1) or 1.0)!r}NT"
    v = float(s)
    if v < 0:
        raise ValueError("lambda must be non-negative")
    return v


def _str(s):
    return s.strip()


SCHEMA = {
    # data
    "dataset": _str, "seed": int, "N_train": int, "N_test": int, "T": int, "dt": float,
    "V": float, "process_noise_std": float, "obs_noise_std": float,
    "speed": float, "turn_rate": float, "data_file": _str,
    # layout
    "order": int, "spatial_dim": int,
    # training
    "K": int, "L": int, "lambda": _lam, "M": int, "epochs": int, "lr": float, "batch_size": int,
    "mi_samples": int, "mi_init": _str, "mi_obs_noise": _bool,
    "gumbel_start": float, "gumbel_end": float, "gumbel_decay": float, "straight_through": _bool,
    "hidden": int, "classifier_hidden": int, "signal_std": float, "process_noise_init": float,
    "mean_init_std": float, "mean_init": _str, "trainable_obs_noise": _bool, "fixed_obs_noise_std": float,
    "P_stay": float,
    # filtering and evaluation
    "particles": int, "track_stay": float, "resampling": _str,
    "recon_samples": int, "predict_steps": int, "predict_warmup": int,
}

PROFILES = {
    "dubins": {
        "dataset": "dubins", "seed": "0", "N_train": "50", "N_test": "50", "T": "20", "dt": "0.1",
        "V": "1.0", "process_noise_std": "0.31622776601683794", "obs_noise_std": "0.31622776601683794",
        "order": "2", "spatial_dim": "2",
        "K": "4", "L": "3", "lambda": "NT", "M": "20", "epochs": "1500", "lr": "0.01",
        "particles": "512", "track_stay": "0.9", "resampling": "multinomial",
        "recon_samples": "30", "predict_steps": "100", "predict_warmup": "20",
    },
    "surrogate-flight": {
        "dataset": "surrogate", "seed": "0", "N_train": "100", "N_test": "50", "T": "20", "dt": "2.0",
        "speed": "60.0", "turn_rate": "0.05", "obs_noise_std": "30.0",
        "order": "3", "spatial_dim": "2",
        "K": "8", "L": "3", "lambda": "10NT", "M": "50", "epochs": "1500", "lr": "0.01",
        "trainable_obs_noise": "false", "fixed_obs_noise_std": "30.0",
        "particles": "512", "track_stay": "0.9", "resampling": "multinomial",
        "recon_samples": "30", "predict_steps": "100", "predict_warmup": "20",
    },
}


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)
    profile: str | None = None
    source: str | None = None

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def with_overrides(self, **kw):
        vals = dict(self.values)
        for k, v in kw.items():
            if v is None:
                continue
            if k not in SCHEMA:
                raise ConfigError(f"unknown key {k!r}")
            vals[k] = SCHEMA[k](v) if isinstance(v, str) else v
        cfg = ExperimentConfig(vals, self.profile, self.source)
        cfg.validate()
        return cfg

    def validate(self):
        v = self.values
        if v.get("T", 2) < 2:
            raise ConfigError("T must be at least 2")
        if v.get("dt", 1.0) <= 0:
            raise ConfigError("dt must be positive")
        for k in ("K", "L", "M", "N_train", "N_test", "particles", "recon_samples"):
            if k in v and v[k] < 1:
                raise ConfigError(f"{k} must be at least 1")
        if v.get("dataset", "dubins") not in ("dubins", "surrogate"):
            raise ConfigError(f"unknown dataset {v['dataset']!r}")
        if "data_file" in v and not os.path.exists(v["data_file"]):
            raise ConfigError(f"data_file {v['data_file']!r} does not exist")

    # ------------------------------------------------------------------ builders
    def lam(self, N: int, T: int) -> float:
        lam = self.values.get("lambda", 0.0)
        if isinstance(lam, str):
            return float(lam[:-2]) * N * T
        return float(lam)

    def layout(self) -> CanonicalLayout:
        return CanonicalLayout(self.values.get("order", 2), self.values.get("spatial_dim", 2))

    def dubins(self) -> DubinsConfig:
        v = self.values
        kw = {k: v[k] for k in ("V", "process_noise_std", "obs_noise_std", "dt", "T", "N_train",
                                "N_test", "seed") if k in v}
        return DubinsConfig(**kw)

    def surrogate(self) -> SurrogateConfig:
        v = self.values
        w = v.get("turn_rate", 0.05)
        return SurrogateConfig(
            maneuvers=[{"kind": "turn", "rate": -w}, {"kind": "straight"}, {"kind": "turn", "rate": w}],
            speed=v.get("speed", 60.0), dt=v.get("dt", 2.0), T=v.get("T", 20),
            N=v.get("N_train", 100) + v.get("N_test", 0), obs_noise_std=v.get("obs_noise_std", 30.0),
            seed=v.get("seed", 0))

    def training(self, N: int) -> TrainingConfig:
        v = self.values
        kw = {}
        for k in ("K", "L", "T", "M", "epochs", "lr", "batch_size", "mi_samples", "mi_init",
                  "mi_obs_noise", "hidden", "classifier_hidden", "signal_std", "process_noise_init",
                  "mean_init_std", "mean_init", "trainable_obs_noise", "P_stay", "seed"):
            if k in v:
                kw[k] = v[k]
        g = GumbelConfig()
        gkw = {"anneal_start": v.get("gumbel_start", g.anneal_start),
               "anneal_end": v.get("gumbel_end", g.anneal_end),
               "anneal_decay": v.get("gumbel_decay", g.anneal_decay),
               "straight_through": v.get("straight_through", g.straight_through)}
        kw["gumbel"] = GumbelConfig(temperature=gkw["anneal_start"], **gkw)
        kw["lam"] = self.lam(N, v.get("T", 20))
        return TrainingConfig(**kw)

    def obs_noise_var(self):
        s = self.values.get("fixed_obs_noise_std")
        return None if s is None else s * s

    def to_text(self) -> str:
        lines = [f"profile = {self.profile}"] if self.profile else []
        lines += [f"{k} = {v}" for k, v in sorted(self.values.items())]
        return "\n".join(lines) + "\n"


def _coerce(key, raw, where):
    if key not in SCHEMA:
        raise ConfigError(f"{where}: unknown key {key!r}")
    try:
        return SCHEMA[key](raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None


def profile(name: str) -> ExperimentConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    vals = {k: _coerce(k, v, f"profile {name}") for k, v in PROFILES[name].items()}
    return ExperimentConfig(vals, name)


def parse(text: str, source: str = "<config>") -> ExperimentConfig:
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        entries.append((lineno, key, raw))
    prof = None
    vals = {}
    for lineno, key, raw in entries:
        if key == "profile":
            if prof is not None:
                raise ConfigError(f"{source}:{lineno}: profile given twice")
            if raw not in PROFILES:
                raise ConfigError(f"{source}:{lineno}: unknown profile {raw!r}")
            prof = raw
    base = profile(prof) if prof else ExperimentConfig({})
    vals.update(base.values)
    for lineno, key, raw in entries:
        if key == "profile":
            continue
        vals[key] = _coerce(key, raw, f"{source}:{lineno}")
    if "data_file" in vals and not os.path.isabs(vals["data_file"]) and source != "<config>":
        vals["data_file"] = os.path.join(os.path.dirname(os.path.abspath(source)), vals["data_file"])
    cfg = ExperimentConfig(vals, prof, source)
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load(path_or_profile: str) -> ExperimentConfig:
    """Parse a config file, or return a named profile unchanged."""
    if path_or_profile in PROFILES and not os.path.exists(path_or_profile):
        return profile(path_or_profile)
    try:
        with open(path_or_profile) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path_or_profile!r}: {exc.strerror}") from None
    return parse(text, path_or_profile)
