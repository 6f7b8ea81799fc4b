"""Scaled trajectories: spreading, localization and (non-)crossing.

Seven trajectories start at x0 + k sigma0, k = -3..3. In free space they
fan out for eps > 0 and stay parallel for eps = 0. With friction each one
stops at a finite point. In the oscillator the quantum trajectories never
cross, while the classical ones all pass the centre together.

    python demos/trajectories.py [--plot traj.png]
"""
import argparse

import numpy as np

from ckdynamics import Free, GaussianSpec, Harmonic, ModelParams
from ckdynamics import analytic as an
from ckdynamics import trajectories as tr

moving = GaussianSpec(1.0, -10.0, 5.0)
at_rest = GaussianSpec(1.0, 1.0, 0.0)
spec = tr.EnsembleSpec(seeding="offsets", offsets=(-3, -2, -1, 0, 1, 2, 3))


def run(pot, g, p, t_end=20.0):
    x0, w = tr.seed_ensemble(spec, g)
    ts = np.linspace(0.0, t_end, 2001)
    try:
        return tr.integrate_guidance(tr.AnalyticVelocity(pot, g, p), x0, ts, w)
    except tr.SingularVelocityField:
        return tr.integrate_newton(pot, g, p, x0, ts, w, max_step=1e-3)


def free_spreading():
    print("free packet, gamma=0.1: outer gap at t=0 and t=20, and the resting points")
    for eps in (1.0, 0.5, 0.0):
        p = ModelParams(gamma=0.1, epsilon=eps)
        ens = run(Free(), moving, p)
        gaps = tr.neighbour_gaps(ens)
        stop = an.localization_point(moving, p, ens.x_init)
        print(f"  eps={eps:3.1f}  gap {gaps[0, 0]:.3f} -> {gaps[-1, 0]:.3f}   x_inf "
              + " ".join(f"{s:6.2f}" for s in stop))


def oscillator():
    print("\noscillator omega0=0.5, gamma=0.1")
    out = {}
    for eps in (1.0, 0.5, 0.0):
        ens = run(Harmonic(0.5), at_rest, ModelParams(gamma=0.1, epsilon=eps))
        rep = tr.check_noncrossing(ens)
        state = "ordered" if rep.ordered else f"crossed at t={rep.first_violation_time:.2f}"
        print(f"  eps={eps:3.1f}  {state}, min gap {rep.min_gap:.3f}")
        out[eps] = ens
    return out


def plot(osc, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(11, 3.5), sharey=True)
    for ax, (eps, ens) in zip(axes, osc.items()):
        ax.plot(ens.t, ens.x, lw=0.8)
        ax.set_title(f"eps={eps:g}")
        ax.set_xlabel("t")
    axes[0].set_ylabel("x")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    print(f"\nwrote {path}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--plot", help="write a PNG of the oscillator trajectories")
    args = ap.parse_args()
    free_spreading()
    osc = oscillator()
    if args.plot:
        plot(osc, args.plot)
