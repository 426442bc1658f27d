"""One-dimensional toy GSIP used as a ground-truth fixture.

    max u  over u in [0, 1]
    s.t.   w - 0.5 <= 0  for all w in Y(u) = [0, u],

encoded as a gamma-minimization with cost J = -u, so the optimum is
u* = 0.5, gamma* = -0.5.  The admissible interval grows with u, which makes
the instance small enough to brute-force on a grid yet still exercise the
decision-dependent machinery: disturbances above 0.5 must be refuted by
shrinking u, not satisfied.
"""

from __future__ import annotations

import numpy as np

from .core import GsipProblem

__all__ = ["build_toy_problem", "TOY_OPTIMAL_U"]

#: Known optimum of the toy instance (admissible interval may not pass 0.5).
TOY_OPTIMAL_U = 0.5


def build_toy_problem() -> GsipProblem:
    """Build the toy instance; no forward state is involved."""

    empty = np.zeros(0)

    def forward_state(u, w):
        return empty

    def cost(x, u, w):
        return -float(u[0])

    def constraints(x, u, w):
        return np.array([float(w[0]) - 0.5])

    def admissibility(x, u, w):
        wv = float(w[0])
        return np.array([wv, float(u[0]) - wv])

    return GsipProblem(
        n_u=1,
        n_w=1,
        n_g=1,
        n_h=2,
        u_lower=np.array([0.0]),
        u_upper=np.array([1.0]),
        w_lower=np.array([0.0]),
        w_upper=np.array([1.0]),
        gamma_lower=-1.0,
        gamma_upper=0.0,
        forward_state=forward_state,
        cost=cost,
        constraints=constraints,
        admissibility=admissibility,
    )
