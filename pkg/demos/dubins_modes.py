"""Learn three driving modes from noisy Dubins-car windows.

Fifty 20-step windows are simulated with the steering control fixed to one of
{-1, 0, +1} per window. The model gets no labels. After training we check
that each learned expert behaves like one of the controls by rolling it out
for 100 steps, then run the particle filter on the held-out windows.

    python demos/dubins_modes.py            # full profile, a few minutes
    python demos/dubins_modes.py --epochs 200
"""
import argparse

import numpy as np
import torch

from infossm import config, evaluation, objective, simulators, ssm

parser = argparse.ArgumentParser()
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--epochs", type=int, default=None)
args = parser.parse_args()

cfg = config.profile("dubins").with_overrides(seed=args.seed)
if args.epochs:
    cfg = cfg.with_overrides(epochs=args.epochs)
train, test = simulators.dubins_datasets(cfg.dubins())
print(f"train {train.y.shape}, test {test.y.shape}, true label counts {np.bincount(train.labels)}")

res = objective.train(train.y, cfg.training(train.N), cfg.layout(), cfg["dt"],
                      callback=lambda row, m, n: row["epoch"] % 250 or
                      print(f"  epoch {row['epoch']:5d}  mco {row['mco']:9.2f}  mi {row['mi']:7.3f}"))
model, nets = res.model, res.nets

with torch.no_grad():
    report = evaluation.evaluate(model, nets, test.y, cfg["recon_samples"], args.seed, res.priors)
print(f"\nheld-out rmse {report.rmse:.3f}, log-lik {report.mean_log_likelihood:.1f}, mi bound {report.mi:.4f}")

# which code does the classifier give each true control?
with torch.no_grad():
    probs = nets.code_probs(torch.as_tensor(test.y), np.random.default_rng(0).uniform(0, 2 * np.pi, test.N))
codes = probs.argmax(1).numpy()
for u, lab in zip((-1, 0, 1), range(3)):
    print(f"control {u:+d}: codes {np.bincount(codes[test.labels == lab], minlength=model.L)}")

print("\n100-step rollout of the expert picked from a 20-step warm-up")
for p in evaluation.long_term_prediction(model, nets, 100, 20, rng=0):
    print(f"  u={p.control:+g}  code {p.code}  heading change {p.heading_change:+6.2f} rad  "
          f"terminal error {p.terminal_error:5.2f}  {'ok' if p.sign_ok else 'wrong sign'}")

print("\nparticle filter vs open-loop reconstruction (first 10 test windows)")
e = evaluation.tracking_errors(test.y[:10], model, nets, test.states[:10, :, :2], 512,
                               ssm.ModeTransitionMatrix.sticky(model.L, 0.9), args.seed)
print(f"  mean position error: tracked {e[:, 0].mean():.3f}, open-loop {e[:, 1].mean():.3f}")
