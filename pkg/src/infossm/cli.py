"""Command-line entry point: ``infossm gen-data|train|eval|predict|track``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
The thread count comes from ``INFOSSM_NUM_THREADS`` (default 1).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np
import torch

from . import config as cfgmod
from . import evaluation, filtering, objective, persistence, simulators, ssm
from .diffmath import NotPositiveDefinite

log = logging.getLogger("infossm")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


def _load_config(args):
    cfg = cfgmod.load(args.config)
    return cfg.with_overrides(seed=getattr(args, "seed", None))


def _dt(batch, cfg):
    if len(batch.t) > 1:
        return float(batch.t[1] - batch.t[0])
    return cfg.get("dt", 1.0)


def cmd_gen_data(args):
    cfg = _load_config(args)
    if cfg.get("dataset", "dubins") == "dubins":
        train, test = simulators.dubins_datasets(cfg.dubins())
    else:
        batch = simulators.simulate_surrogate_modes(cfg.surrogate())
        n = cfg["N_train"]
        train, test = batch.subset(slice(0, n)), batch.subset(slice(n, None))
    os.makedirs(args.out, exist_ok=True)
    for name, b in (("train", train), ("test", test)):
        persistence.write_dataset(os.path.join(args.out, f"{name}.csv"), b, args.with_labels)
        print(f"{name}: N={b.N} T={b.T} dims={b.obs_dim} -> {os.path.join(args.out, name + '.csv')}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args).with_overrides(L=args.modes, epochs=args.epochs)
    if args.lam is not None:
        cfg = cfg.with_overrides(**{"lambda": args.lam})
    data = args.data or cfg.get("data_file")
    if not data:
        raise cfgmod.ConfigError("train needs --data or data_file in the config")
    batch = persistence.read_dataset(data)
    tcfg = cfg.training(batch.N)
    layout = cfg.layout()
    if layout.spatial_dim != batch.obs_dim:
        raise cfgmod.ConfigError(f"layout has {layout.spatial_dim} observed dims, data has {batch.obs_dim}")

    def progress(row, model, nets):
        if row["epoch"] % max(1, tcfg.epochs // 20) == 0:
            print(f"epoch {row['epoch']:5d}  mco {row['mco']:12.3f}  mi {row['mi']:8.4f}  "
                  f"{row['wallclock_s']:7.1f}s", flush=True)

    log_path = args.log or os.path.splitext(args.out)[0] + ".metrics.csv"
    try:
        res = objective.train(batch.y, tcfg, layout, _dt(batch, cfg), log_path=log_path,
                              callback=progress, obs_noise_var=cfg.obs_noise_var())
    except objective.NonFiniteObjective as exc:
        if exc.result is not None:
            persistence.save_model(args.out + ".partial", exc.result.model, exc.result.nets,
                                   exc.result.priors, tcfg.to_dict(), tcfg.seed)
        raise
    persistence.save_model(args.out, res.model, res.nets, res.priors, tcfg.to_dict(), tcfg.seed)
    print(f"saved {args.out} (metrics in {log_path})")
    return EXIT_OK


def cmd_eval(args):
    model, nets, priors, _ = persistence.load_model(args.model)
    batch = persistence.read_dataset(args.data)
    with torch.no_grad():
        out = evaluation.evaluate(model, nets, batch.y, args.samples, args.seed, priors,
                                  keep_samples=bool(args.plot_dump))
    report, recs = out if args.plot_dump else (out, None)
    text = "\n".join(report.lines()) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(f"rmse {report.rmse:.6f}  mean_log_likelihood {report.mean_log_likelihood:.6f}  "
          f"mi {report.mi:.6f}  (N={len(report.rows)})")
    if args.plot_dump:
        rows = [np.column_stack([np.full(batch.T, n), evaluation.plot_rows(r, batch.y[n], _dt(batch, {}))])
                for n, r in enumerate(recs)]
        D = batch.obs_dim
        header = ["traj_id", "t"] + [f"{p}_{d + 1}" for p in ("truth", "mean", "lower", "upper")
                                     for d in range(D)]
        np.savetxt(args.plot_dump, np.vstack(rows), delimiter=",", header=",".join(header), comments="")
    return EXIT_OK


def cmd_predict(args):
    model, nets, _, manifest = persistence.load_model(args.model)
    if model.layout.order != 2 or model.layout.spatial_dim != 2:
        raise cfgmod.ConfigError("predict follows the planar Dubins protocol (order 2, two dims)")
    os.makedirs(args.out, exist_ok=True)
    dt = manifest["dt"]
    preds = evaluation.long_term_prediction(model, nets, args.steps, args.warmup, dt=dt, rng=args.seed)
    with torch.no_grad():
        x1 = torch.tensor([[0.0, 0.0, 1.0, 0.0]], dtype=torch.float64)
        for l in range(model.L):
            w = torch.zeros(1, args.steps, model.L, dtype=torch.float64)
            w[..., l] = 1.0
            eps = torch.zeros(1, args.steps, model.layout.gp_output_dim, dtype=torch.float64)
            states = ssm.rollout(x1, w, eps, model, noise=False)[0].numpy()
            t = np.arange(args.steps + 1) * dt
            path = os.path.join(args.out, f"mode_{l}.csv")
            np.savetxt(path, np.column_stack([t, states]), delimiter=",",
                       header="t,px,py,vx,vy", comments="")
    lines = ["control\tcode\theading_change\tterminal_error\tsign_ok"]
    for p in preds:
        lines.append(f"{p.control:g}\t{p.code}\t{p.heading_change:.6f}\t{p.terminal_error:.6f}\t{int(p.sign_ok)}")
    with open(os.path.join(args.out, "summary.tsv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_track(args):
    model, nets, _, _ = persistence.load_model(args.model)
    batch = persistence.read_dataset(args.data)
    P = ssm.ModeTransitionMatrix.sticky(model.L, args.stay)
    rng = np.random.default_rng(args.seed)
    lines = ["traj\ttracked_error\topen_loop_error\t" + "\t".join(f"p_code{l}" for l in range(model.L))]
    errs = []
    idx = list(model.obs.indices)
    for n in range(batch.N):
        res = filtering.track(batch.y[n], model, nets, args.particles, rng, P)
        tracked = np.linalg.norm(res.means[:, idx] - batch.y[n], axis=1).mean()
        rec = evaluation.reconstruct(batch.y[n], model, nets, 30, rng)
        open_loop = np.linalg.norm(rec.mean - batch.y[n], axis=1).mean()
        errs.append((tracked, open_loop))
        probs = "\t".join(f"{p:.4f}" for p in res.code_probs)
        lines.append(f"{n}\t{tracked:.6f}\t{open_loop:.6f}\t{probs}")
    errs = np.array(errs)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    print(f"mean tracked error {errs[:, 0].mean():.6f}  mean open-loop error {errs[:, 1].mean():.6f}  "
          f"(N={batch.N}, particles={args.particles})")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="infossm", description="Multi-mode GP state-space models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="simulate train/test datasets")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True, help="output directory for train.csv and test.csv")
    g.add_argument("--seed", type=int)
    g.add_argument("--with-labels", action="store_true", help="include ground-truth labels (debug only)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fit a model")
    t.add_argument("--config", required=True)
    t.add_argument("--data")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--lambda", dest="lam")
    t.add_argument("--modes", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--log")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="reconstruction metrics on held-out data")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--samples", type=int, default=30)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.add_argument("--plot-dump")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="long-horizon per-mode prediction")
    r.add_argument("--model", required=True)
    r.add_argument("--steps", type=int, default=100)
    r.add_argument("--warmup", type=int, default=20)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)

    k = sub.add_parser("track", help="particle-filter tracking over observation windows")
    k.add_argument("--model", required=True)
    k.add_argument("--data", required=True)
    k.add_argument("--particles", type=int, default=512)
    k.add_argument("--stay", type=float, default=0.9)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--out")
    k.set_defaults(func=cmd_track)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(int(os.environ.get("INFOSSM_NUM_THREADS", "1")))
    try:
        return args.func(args)
    except (objective.NonFiniteObjective, NotPositiveDefinite, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (cfgmod.ConfigError, persistence.ArchiveError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
