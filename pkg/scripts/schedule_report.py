"""Print the headline numbers of the linear and cosine schedules at full and toy scale.

The column ``amp_T`` is 1/sqrt(alpha_T), the factor by which an error in the
noise estimate at the first reverse step is multiplied.

    python3 scripts/schedule_report.py
"""
import argparse
import math

from sr3endo.config import RunConfig


def row(name, sched):
    g, b, a = sched.gamma, sched.beta, sched.alpha
    half = next(t for t in range(1, sched.T + 1) if g[t] < 0.5)
    return (f"{name:<10} T={sched.T:<5} beta_1={b[1]:.3g}  beta_T={b[-1]:.4g}  gamma_T={g[-1]:.3e}  "
            f"gamma<0.5 from t={half:<5} amp_T={1 / math.sqrt(a[-1]):.2f}")


def main(argv=None):
    argparse.ArgumentParser(description=__doc__.splitlines()[0]).parse_args(argv)
    for preset in ("gen1", "gen2"):
        for toy in (False, True):
            cfg = RunConfig.resolve(preset, toy=toy)
            print(row(preset + (" toy" if toy else ""), cfg.schedule()))


if __name__ == "__main__":
    main()
