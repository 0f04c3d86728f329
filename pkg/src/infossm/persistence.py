"""Dataset CSV files and single-file model archives.

Datasets are delimited text with a header row (traj_id, t, y_1..y_D and an
optional label column). Model archives are zip files holding a JSON
manifest plus one little-endian float64 blob per array, so a save/load
round trip is bit-exact.
"""
from __future__ import annotations

import csv
import io
import json
import zipfile

import numpy as np
import torch

from . import gp, ssm
from .diffmath import DTYPE
from .inference import InferenceNets
from .objective import Priors
from .simulators import TrajectoryBatch

FORMAT_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class ArchiveError(ValueError):
    pass


# --------------------------------------------------------------------------- datasets

def write_dataset(path, batch: TrajectoryBatch, with_labels: bool = False):
    D = batch.obs_dim
    header = ["traj_id", "t"] + [f"y_{d + 1}" for d in range(D)]
    labels = with_labels and batch.labels is not None
    if labels:
        header.append("label")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for n in range(batch.N):
            for k in range(batch.T):
                row = [n, repr(float(batch.t[k]))] + [repr(float(v)) for v in batch.y[n, k]]
                if labels:
                    row.append(int(batch.labels[n]))
                w.writerow(row)


def read_dataset(path) -> TrajectoryBatch:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty dataset file")
    header = rows[0]
    if header[:2] != ["traj_id", "t"]:
        raise ValueError(f"{path}:1: header must start with traj_id,t")
    ycols = [i for i, h in enumerate(header) if h.startswith("y_")]
    lcol = header.index("label") if "label" in header else None
    if not ycols:
        raise ValueError(f"{path}:1: no observation columns")
    trajs, labels = {}, {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            tid, t = int(row[0]), float(row[1])
            y = [float(row[i]) for i in ycols]
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
        trajs.setdefault(tid, []).append((t, y))
        if lcol is not None:
            labels[tid] = int(row[lcol])
    ids = sorted(trajs)
    lengths = {len(trajs[i]) for i in ids}
    if len(lengths) != 1:
        raise ValueError(f"{path}: trajectories have different lengths {sorted(lengths)}")
    t = np.array([r[0] for r in trajs[ids[0]]])
    y = np.array([[r[1] for r in trajs[i]] for i in ids])
    lab = np.array([labels[i] for i in ids]) if lcol is not None else None
    return TrajectoryBatch(y, t, tuple("m" for _ in ycols), lab)


# --------------------------------------------------------------------------- model archives

def _blob(a) -> bytes:
    return np.ascontiguousarray(np.asarray(a, dtype="<f8")).tobytes()


def _arrays(model: ssm.MultiModalSSM, nets: InferenceNets):
    out = {}
    for l, m in enumerate(model.modes):
        for k, v in m.named_arrays().items():
            out[f"mode{l}/{k}"] = v.detach().numpy()
    out["P"] = model.P.numpy() if model.P.logits is None else model.P.logits.detach().numpy()
    out["obs/log_noise_var"] = model.obs.log_noise_var.detach().numpy()
    for k, v in nets.state_dict().items():
        out[f"nets/{k}"] = v.detach().numpy()
    return out


def save_model(path, model: ssm.MultiModalSSM, nets: InferenceNets, priors: Priors | None = None,
               config: dict | None = None, seed: int | None = None):
    arrays = _arrays(model, nets)
    priors = priors or Priors.default(model.layout, model.L)
    manifest = {
        "format_version": FORMAT_VERSION,
        "layout": model.layout.to_dict(),
        "dt": model.dt,
        "L": model.L,
        "jitter": [m.jitter for m in model.modes],
        "P_trainable": model.P.trainable,
        "P_is_logits": model.P.logits is not None,
        "obs": {"indices": list(model.obs.indices), "trainable": model.obs.trainable},
        "nets": nets.config(),
        "priors": {"x1_mean": priors.x1_mean.tolist(), "x1_var": priors.x1_var.tolist(),
                   "c1_probs": priors.c1_probs.tolist(), "shifted": priors.shifted},
        "config": config or {},
        "seed": seed,
        "arrays": {k: {"shape": list(np.shape(v)), "dtype": "<f8", "file": f"arrays/{i}.bin"}
                   for i, (k, v) in enumerate(arrays.items())},
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        def put(name, data):
            info = zipfile.ZipInfo(name, _ZIP_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)
        put("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        for k, v in arrays.items():
            put(manifest["arrays"][k]["file"], _blob(v))


def load_model(path):
    """(model, nets, priors, manifest) from an archive written by :func:`save_model`."""
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as exc:
        raise ArchiveError(f"{path}: not a model archive ({exc})") from None
    with zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ArchiveError(f"{path}: unsupported format version {manifest.get('format_version')}")
        arrays = {}
        for k, meta in manifest["arrays"].items():
            a = np.frombuffer(zf.read(meta["file"]), dtype="<f8")
            arrays[k] = a.reshape(meta["shape"]).astype(np.float64)
    layout = ssm.CanonicalLayout(**manifest["layout"])
    modes = []
    for l in range(manifest["L"]):
        pre = f"mode{l}/"
        modes.append(gp.SparseGPMode.from_arrays(
            {k[len(pre):]: v for k, v in arrays.items() if k.startswith(pre)},
            jitter=manifest["jitter"][l]))
    if manifest["P_is_logits"]:
        P = ssm.ModeTransitionMatrix(logits=arrays["P"], trainable=manifest["P_trainable"])
    else:
        P = ssm.ModeTransitionMatrix(arrays["P"], trainable=False)
    obs = ssm.ObservationModel(manifest["obs"]["indices"], 1.0, layout.state_dim,
                               trainable=manifest["obs"]["trainable"])
    with torch.no_grad():
        obs.log_noise_var.copy_(torch.as_tensor(arrays["obs/log_noise_var"]))
    model = ssm.MultiModalSSM(modes, P, obs, layout, manifest["dt"])
    nets = InferenceNets(**manifest["nets"])
    state = {k[len("nets/"):]: torch.as_tensor(v, dtype=DTYPE) for k, v in arrays.items()
             if k.startswith("nets/")}
    nets.load_state_dict(state)
    pr = manifest["priors"]
    priors = Priors(pr["x1_mean"], pr["x1_var"], pr["c1_probs"], pr["shifted"])
    return model, nets, priors, manifest


def archive_bytes(model, nets, **kw) -> bytes:
    buf = io.BytesIO()
    save_model(buf, model, nets, **kw)
    return buf.getvalue()
