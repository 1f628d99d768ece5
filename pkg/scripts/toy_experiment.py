"""Desk-scale experiment: train the toy gen2 model and take its sampler apart.

Reports, on the held-out toy items:
  * bicubic PSNR, and SR PSNR with and without x0 clipping;
  * a sampler run with a conditioning oracle that believes y0 = bicubic input
    (checks the sampler itself reaches the bicubic score);
  * the model's one-shot x0 error at several t, starting from the true
    forward marginal, next to the same error along a real sampling trajectory.

    python3 scripts/toy_experiment.py --out runs/toy            # train, then analyse
    python3 scripts/toy_experiment.py --ckpt runs/toy/last.ckpt # analyse only
Any further ``--key value`` pairs are passed to ``sr3endo train``.
"""
import argparse
import math
from pathlib import Path

import numpy as np

from sr3endo import tensor as T
from sr3endo.cli import _model_from_checkpoint, main as cli_main
from sr3endo.diffusion import forward_marginal, from_model_range, sample
from sr3endo.imaging import toy_splits
from sr3endo.metrics import psnr


class ConditioningOracle:
    """Noise estimate of a model that is certain the clean image is the conditioning input."""

    def predict_eps(self, x_cond, y_t, gamma, training=False, rng=None):
        return (y_t - math.sqrt(gamma) * x_cond) / math.sqrt(1.0 - gamma)


def mean_psnr(y, y0):
    a, b = from_model_range(y).transpose(0, 2, 3, 1), from_model_range(y0).transpose(0, 2, 3, 1)
    return float(np.mean([psnr(p, q) for p, q in zip(a, b)]))


def x0_hat(model, x, y, g):
    with T.no_grad():
        eps = model.predict_eps(x, y, g).data
    return np.clip((y - math.sqrt(1 - g) * eps) / math.sqrt(g), -1, 1)


def analyse(ckpt, items, seed):
    cfg, state, model = _model_from_checkpoint(ckpt)
    T.set_precision(cfg["precision"])
    sched = state.schedule
    _, val = toy_splits(cfg["data.toy_train_items"], cfg["data.toy_val_items"], cfg["data.hr_size"],
                        cfg["data.scale"], cfg["seed"])
    b = val.batch(val.index[:items])
    print(f"items={items} T={sched.T} kind={sched.kind}")
    print(f"bicubic            {mean_psnr(b.x_cond, b.y0):.2f} dB")
    print(f"conditioning oracle {mean_psnr(sample(ConditioningOracle(), b.x_cond, sched, T.Rng(seed)), b.y0):.2f} dB")
    for clip in (False, True):
        print(f"model, clip_x0={clip!s:<5} {mean_psnr(sample(model, b.x_cond, sched, T.Rng(seed), clip), b.y0):.2f} dB")

    probe = sorted({1, sched.T // 20, sched.T // 4, sched.T // 2, 3 * sched.T // 4, 19 * sched.T // 20, sched.T})
    rs = np.random.default_rng(seed)
    print("\n   t      gamma   x0 mse (marginal)   x0 mse (trajectory)")
    traj = {}
    rng = T.Rng(seed)
    y = rng.gaussian(b.y0.shape)
    for t in range(sched.T, 0, -1):
        a, g = float(sched.alpha[t]), float(sched.gamma[t])
        x0 = x0_hat(model, b.x_cond, y, g)
        if t in probe:
            traj[t] = float(np.mean((x0 - b.y0) ** 2))
        eps = (y - math.sqrt(g) * x0) / math.sqrt(1 - g)
        y = (y - (1 - a) / math.sqrt(1 - g) * eps) / math.sqrt(a)
        if t > 1:
            y = y + math.sqrt(1 - a) * rng.gaussian(y.shape)
    for t in probe:
        g = float(sched.gamma[t])
        y_t = forward_marginal(b.y0, g, rs.standard_normal(b.y0.shape).astype(b.y0.dtype))
        marg = float(np.mean((x0_hat(model, b.x_cond, y_t, g) - b.y0) ** 2))
        print(f"{t:>4}  {g:9.3e}   {marg:17.3e}   {traj[t]:19.3e}")
    print(f"bicubic mse in model range: {float(np.mean((b.x_cond - b.y0) ** 2)):.3e}")


def run():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ckpt", help="analyse this checkpoint instead of training")
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--items", type=int, default=16)
    ap.add_argument("--seed", type=int, default=1)
    args, extra = ap.parse_known_args()
    ckpt = args.ckpt
    if ckpt is None:
        code = cli_main(["train", "--toy", "--preset", "gen2", "--out", args.out] + extra)
        if code:
            raise SystemExit(code)
        ckpt = Path(args.out) / "last.ckpt"
    analyse(ckpt, args.items, args.seed)


if __name__ == "__main__":
    run()
