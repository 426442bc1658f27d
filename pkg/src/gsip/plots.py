"""Figure rendering for solve and evaluation reports.

The delimited files stay the canonical record; these renderings exist so a
run directory is inspectable without loading anything."""

from __future__ import annotations

from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .quadrotor import QuadParams, simulate

__all__ = ["plot_trajectories", "plot_convergence"]


def plot_trajectories(plan: np.ndarray, disturbances: Sequence[np.ndarray],
                      path: str, p: QuadParams,
                      gamma: Optional[float] = None) -> None:
    """Sampled position traces in the r-s plane: trajectories in gray,
    final positions in red, the tracking target in green."""
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    finals = []
    for w in disturbances:
        traj = simulate(plan, w, "esip", p)
        ax.plot(traj[:, 0], traj[:, 2], color="0.6", lw=0.6, alpha=0.5, zorder=1)
        finals.append((traj[-1, 0], traj[-1, 2]))
    if finals:
        fx, fy = zip(*finals)
        ax.scatter(fx, fy, s=6, color="tab:red", zorder=3, label="final")
    ax.scatter([p.r_ref], [p.s_ref], s=60, marker="*", color="tab:green",
               zorder=4, label="target")
    ax.axhline(p.alt_lower, color="k", lw=0.8, ls="--")
    ax.axhline(p.alt_upper, color="k", lw=0.8, ls="--")
    ax.set_xlabel("lateral position r [m]")
    ax.set_ylabel("altitude s [m]")
    title = f"{len(finals)} sampled trajectories"
    if gamma is not None:
        title += f" (gamma {gamma:.2f})"
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_convergence(gamma_history: Sequence[float],
                     sigma_history: Sequence[float], path: str) -> None:
    """Master value and separation violation per outer iteration."""
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(5.0, 4.8), sharex=True)
    ks = np.arange(1, len(gamma_history) + 1)
    ax1.plot(ks, gamma_history, marker="o", ms=3)
    ax1.set_ylabel("master value")
    ax1.grid(alpha=0.3)
    ks = np.arange(1, len(sigma_history) + 1)
    sig = np.asarray(sigma_history, dtype=float)
    finite = np.isfinite(sig)
    ax2.plot(ks[finite], np.maximum(sig[finite], 1e-16), marker="o", ms=3)
    ax2.set_yscale("log")
    ax2.set_ylabel("separation violation")
    ax2.set_xlabel("outer iteration")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
