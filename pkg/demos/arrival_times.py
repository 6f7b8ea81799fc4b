"""Arrival times at a detector, from quantum (eps=1) down to classical (eps=0).

A packet starts at x0 = -10 with p0 = 5 and the detector sits at X = 0.
Friction slows the packet, a negative field strength pushes it forward,
and the classical ensemble arrives later but in a narrower burst.

    python demos/arrival_times.py [--plot arrival.png]
"""
import argparse

import numpy as np

from ckdynamics import GaussianSpec, ModelParams
from ckdynamics import stats

packet = GaussianSpec(sigma0=1.0, x0=-10.0, p0=5.0)
X = 0.0


def distributions():
    print("gamma     a   eps    peak     fwhm     mean")
    rows = []
    for gamma, a in ((0.1, 0.0), (0.2, -0.5)):
        for eps in (1.0, 0.5, 0.0):
            d = stats.arrival_distribution_current(stats.potential_for(a), packet,
                                                   ModelParams(gamma=gamma, epsilon=eps), X, n_samples=8001)
            print(f"{gamma:5.2f} {a:5.2f} {eps:5.2f} {d.peak():7.4f} {d.fwhm():8.4f} {d.mean:8.4f}")
            rows.append((gamma, a, eps, d))
    return rows


def mean_times():
    gam = np.linspace(0.0, 0.2, 5)
    tab = stats.mean_arrival_sweep(packet, ModelParams(), gam, [1.0, 0.5, 0.0], [0.0, -0.25, -0.5])
    print("\nmean arrival time tau(gamma), columns (eps, a)")
    keys = sorted(tab.tau)
    print("gamma " + " ".join(f"{e:g},{a:g}".rjust(9) for e, a in keys))
    for k, g in enumerate(gam):
        print(f"{g:5.2f} " + " ".join(f"{tab.tau[key][k]:9.4f}" for key in keys))
    print("nondecreasing in gamma:", all(tab.nondecreasing_in_gamma().values()))


def plot(rows, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5), sharey=True)
    for ax, (gamma, a) in zip(axes, ((0.1, 0.0), (0.2, -0.5))):
        for g, aa, eps, d in rows:
            if (g, aa) == (gamma, a):
                ax.plot(d.t, d.density, label=f"eps={eps:g}")
        ax.set_xlim(1.0, 3.5)
        ax.set_title(f"gamma={gamma}, a={a}")
        ax.set_xlabel("t")
    axes[0].set_ylabel("arrival density")
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    print(f"\nwrote {path}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--plot", help="write a PNG (needs matplotlib)")
    args = ap.parse_args()
    rows = distributions()
    mean_times()
    if args.plot:
        plot(rows, args.plot)
