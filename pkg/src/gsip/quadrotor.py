"""Planar quadrotor benchmark with thrust uncertainty.

State x = (r, r_dot, s, s_dot, psi, psi_dot): lateral position, altitude,
pitch, and their rates.  Two motor thrusts act through the pitch angle; the
realized thrusts deviate from the commanded plan by a disturbance whose
admissible set scales with the plan itself, which is what makes the robust
problem decision-coupled.

Discretization is the implicit midpoint rule with thrusts held constant
over each step.  Because the angular acceleration does not depend on the
state, the implicit relation solves in closed form in the order
psi_dot -> psi -> (r_dot, s_dot) -> (r, s); an independent residual
evaluator checks the implicit relation directly.

Four problem variants share cost, path constraints, and decision box:

* esip: the true plan-scaled disturbance set (per-axis bands proportional
  to the commanded thrust plus a proportionality coupling between axes),
  decision-dependent, solved through the existence-constrained path.
* sip1: the union of the true sets over all plans (fixed boxes plus a
  same-sign coupling row), a conservative fixed-set relaxation.
* sip2: fixed boxes with the two axes forced equal, a non-conservative
  fixed-set approximation.
* rsip: exact reparameterization by a single shared relative error per
  step with multiplicative thrusts, a standard SIP.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import ContractViolationError, GsipProblem

__all__ = [
    "VARIANT_ESIP",
    "VARIANT_SIP1",
    "VARIANT_SIP2",
    "VARIANT_RSIP",
    "VARIANTS",
    "QuadParams",
    "ThrustPlan",
    "Disturbance",
    "McReport",
    "accelerations",
    "simulate",
    "dynamics_residual",
    "cost",
    "path_constraint_rows",
    "uncertainty_rows",
    "build_variant",
    "sample_disturbance",
    "monte_carlo",
    "export_trajectories",
]

VARIANT_ESIP = "esip"
VARIANT_SIP1 = "sip1"
VARIANT_SIP2 = "sip2"
VARIANT_RSIP = "rsip"
VARIANTS = (VARIANT_ESIP, VARIANT_SIP1, VARIANT_SIP2, VARIANT_RSIP)


@dataclass(frozen=True)
class QuadParams:
    mass: float = 0.15
    inertia: float = 0.00125
    arm: float = 0.1            # moment arm of each motor about the center
    gravity: float = 9.81
    dt: float = 0.2
    n_steps: int = 10
    r_ref: float = 1.0
    s_ref: float = 2.0
    x0: Tuple[float, ...] = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    thrust_lower: float = -2.0
    thrust_upper: float = 2.0
    uncert_frac: float = 0.05   # disturbance band as a fraction of the plan
    alt_lower: float = 0.0
    alt_upper: float = 2.5
    gamma_lower: float = 0.0
    gamma_upper: float = 1e4
    # the literal band reads as an empty slice for negative commanded
    # thrusts; this switch substitutes |v|-scaled bands instead (off to
    # keep the literal form)
    magnitude_bounds: bool = False

    def __post_init__(self):
        for name in ("mass", "inertia", "arm", "gravity", "dt"):
            if getattr(self, name) <= 0:
                raise ContractViolationError(f"{name} must be positive")
        if self.n_steps < 1:
            raise ContractViolationError("n_steps must be >= 1")
        if len(self.x0) != 6:
            raise ContractViolationError("x0 must have 6 components")


@dataclass(frozen=True)
class ThrustPlan:
    """Commanded thrusts, interleaved (motor1, motor2) per step."""

    v: np.ndarray
    params: QuadParams = field(default=QuadParams(), compare=False)

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        if v.ndim != 1 or v.size != 2 * self.params.n_steps:
            raise ContractViolationError(
                f"plan must have {2 * self.params.n_steps} entries, got {v.size}"
            )
        if not np.all(np.isfinite(v)):
            raise ContractViolationError("plan entries must be finite")
        if np.any(v < self.params.thrust_lower - 1e-12) or np.any(
            v > self.params.thrust_upper + 1e-12
        ):
            raise ContractViolationError("plan entries leave the thrust box")
        v.setflags(write=False)
        object.__setattr__(self, "v", v)


@dataclass(frozen=True)
class Disturbance:
    """Additive thrust errors (length 2N), or shared relative errors
    (length N) for the rsip variant."""

    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim != 1 or not np.all(np.isfinite(w)):
            raise ContractViolationError("disturbance must be a finite vector")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)


@dataclass(frozen=True)
class McReport:
    samples: int
    avg_cost: float
    worst_cost: float
    violation_count: int
    gamma: float

    def __post_init__(self):
        if self.samples < 1:
            raise ContractViolationError("samples must be >= 1")
        if self.worst_cost < self.avg_cost - 1e-9:
            raise ContractViolationError("worst cost cannot be below average")
        if not 0 <= self.violation_count <= self.samples:
            raise ContractViolationError("violation count out of range")


def accelerations(state: Sequence[float], u1: float, u2: float,
                  p: QuadParams) -> Tuple[float, float, float]:
    psi = float(state[4])
    thrust = (u1 + u2) / p.mass
    r_dd = math.sin(psi) * thrust
    s_dd = math.cos(psi) * thrust - p.gravity
    psi_dd = p.arm * (u1 - u2) / p.inertia
    return r_dd, s_dd, psi_dd


def _realized_thrusts(plan_v: np.ndarray, dist_w: np.ndarray, variant: str,
                      p: QuadParams) -> List[Tuple[float, float]]:
    n = p.n_steps
    if plan_v.size != 2 * n:
        raise ContractViolationError(f"plan length {plan_v.size}, expected {2 * n}")
    if variant == VARIANT_RSIP:
        if dist_w.size != n:
            raise ContractViolationError(
                f"rsip disturbance length {dist_w.size}, expected {n}"
            )
        return [
            (float(plan_v[2 * k]) * (1.0 + float(dist_w[k])),
             float(plan_v[2 * k + 1]) * (1.0 + float(dist_w[k])))
            for k in range(n)
        ]
    if variant not in VARIANTS:
        raise ContractViolationError(f"unknown variant {variant!r}")
    if dist_w.size != 2 * n:
        raise ContractViolationError(
            f"disturbance length {dist_w.size}, expected {2 * n}"
        )
    return [
        (float(plan_v[2 * k]) + float(dist_w[2 * k]),
         float(plan_v[2 * k + 1]) + float(dist_w[2 * k + 1]))
        for k in range(n)
    ]


def simulate(plan: np.ndarray, dist: np.ndarray, variant: str,
             p: QuadParams) -> np.ndarray:
    """Integrate the closed-form midpoint update; returns (N+1, 6) states.

    The step's thrust pair is held at both stencil evaluations.  Scalar
    float arithmetic throughout: this sits in every NLP inner loop.
    """
    plan_v = np.asarray(plan, dtype=float).reshape(-1)
    dist_w = np.asarray(dist, dtype=float).reshape(-1)
    thrusts = _realized_thrusts(plan_v, dist_w, variant, p)
    dt = p.dt
    half = 0.5 * dt
    inv_m = 1.0 / p.mass
    grav = p.gravity
    arm_over_i = p.arm / p.inertia
    out = np.empty((p.n_steps + 1, 6))
    r, r_d, s, s_d, psi, psi_d = (float(c) for c in p.x0)
    out[0] = (r, r_d, s, s_d, psi, psi_d)
    for k, (u1, u2) in enumerate(thrusts):
        thrust = (u1 + u2) * inv_m
        psi_dd = arm_over_i * (u1 - u2)
        psi_d1 = psi_d + dt * psi_dd
        psi1 = psi + half * (psi_d + psi_d1)
        r_dd0 = math.sin(psi) * thrust
        s_dd0 = math.cos(psi) * thrust - grav
        r_dd1 = math.sin(psi1) * thrust
        s_dd1 = math.cos(psi1) * thrust - grav
        r_d1 = r_d + half * (r_dd0 + r_dd1)
        s_d1 = s_d + half * (s_dd0 + s_dd1)
        r1 = r + half * (r_d + r_d1)
        s1 = s + half * (s_d + s_d1)
        out[k + 1] = (r1, r_d1, s1, s_d1, psi1, psi_d1)
        r, r_d, s, s_d, psi, psi_d = r1, r_d1, s1, s_d1, psi1, psi_d1
    return out


def dynamics_residual(traj: np.ndarray, plan: np.ndarray, dist: np.ndarray,
                      variant: str, p: QuadParams) -> float:
    """Sup-norm residual of the implicit midpoint relation at a trajectory.

    Evaluates the averaged-derivative update directly from the stored
    states, independent of the closed-form solve order."""
    traj = np.asarray(traj, dtype=float)
    if traj.shape != (p.n_steps + 1, 6):
        raise ContractViolationError(
            f"trajectory shape {traj.shape}, expected {(p.n_steps + 1, 6)}"
        )
    plan_v = np.asarray(plan, dtype=float).reshape(-1)
    dist_w = np.asarray(dist, dtype=float).reshape(-1)
    thrusts = _realized_thrusts(plan_v, dist_w, variant, p)
    worst = 0.0
    for k, (u1, u2) in enumerate(thrusts):
        xk = traj[k]
        xk1 = traj[k + 1]
        a0 = accelerations(xk, u1, u2, p)
        a1 = accelerations(xk1, u1, u2, p)
        avg = np.array([
            0.5 * (xk[1] + xk1[1]),
            0.5 * (a0[0] + a1[0]),
            0.5 * (xk[3] + xk1[3]),
            0.5 * (a0[1] + a1[1]),
            0.5 * (xk[5] + xk1[5]),
            0.5 * (a0[2] + a1[2]),
        ])
        worst = max(worst, float(np.max(np.abs(xk1 - xk - p.dt * avg))))
    return worst


def cost(traj: np.ndarray, p: QuadParams) -> float:
    """Tracking cost summed over steps 1..N (initial state excluded)."""
    traj = np.asarray(traj, dtype=float)
    dr = traj[1:, 0] - p.r_ref
    ds = traj[1:, 2] - p.s_ref
    return float(np.dot(dr, dr) + np.dot(ds, ds))


def path_constraint_rows(traj: np.ndarray, p: QuadParams) -> np.ndarray:
    """Altitude band rows (<= 0 feasible): (-s_i, s_i - ceiling) per step."""
    s = np.asarray(traj, dtype=float)[1:, 2]
    rows = np.empty(2 * s.size)
    rows[0::2] = p.alt_lower - s
    rows[1::2] = s - p.alt_upper
    return rows


def uncertainty_rows(plan: np.ndarray, dist: np.ndarray,
                     p: QuadParams) -> np.ndarray:
    """Plan-scaled admissibility rows (>= 0 admissible), six per step:
    two band rows per motor plus the proportionality coupling split into
    an opposed pair."""
    v = np.asarray(plan, dtype=float).reshape(-1)
    w = np.asarray(dist, dtype=float).reshape(-1)
    n = p.n_steps
    if v.size != 2 * n or w.size != 2 * n:
        raise ContractViolationError("plan and disturbance must have length 2N")
    v1, v2 = v[0::2], v[1::2]
    w1, w2 = w[0::2], w[1::2]
    scale1 = p.uncert_frac * (np.abs(v1) if p.magnitude_bounds else v1)
    scale2 = p.uncert_frac * (np.abs(v2) if p.magnitude_bounds else v2)
    couple = w1 * v2 - w2 * v1
    rows = np.empty(6 * n)
    rows[0::6] = scale1 - w1
    rows[1::6] = w1 + scale1
    rows[2::6] = scale2 - w2
    rows[3::6] = w2 + scale2
    rows[4::6] = couple
    rows[5::6] = -couple
    return rows


def _sip1_rows(dist: np.ndarray, p: QuadParams) -> np.ndarray:
    # union of the plan-scaled sets over the thrust box: fixed bands plus
    # a same-sign coupling row per step
    w = np.asarray(dist, dtype=float).reshape(-1)
    band = p.uncert_frac * p.thrust_upper
    w1, w2 = w[0::2], w[1::2]
    rows = np.empty(5 * p.n_steps)
    rows[0::5] = band - w1
    rows[1::5] = w1 + band
    rows[2::5] = band - w2
    rows[3::5] = w2 + band
    rows[4::5] = w1 * w2
    return rows


def _sip2_rows(dist: np.ndarray, p: QuadParams) -> np.ndarray:
    # fixed bands with both axes forced equal (opposed inequality pair)
    w = np.asarray(dist, dtype=float).reshape(-1)
    band = p.uncert_frac * p.thrust_upper
    w1, w2 = w[0::2], w[1::2]
    diff = w1 - w2
    rows = np.empty(6 * p.n_steps)
    rows[0::6] = band - w1
    rows[1::6] = w1 + band
    rows[2::6] = band - w2
    rows[3::6] = w2 + band
    rows[4::6] = diff
    rows[5::6] = -diff
    return rows


def _rsip_rows(dist: np.ndarray, p: QuadParams) -> np.ndarray:
    # the shared-relative-error box, restated as rows so the fixed-set
    # loop sees a nonempty admissibility evaluator
    w = np.asarray(dist, dtype=float).reshape(-1)
    rows = np.empty(2 * p.n_steps)
    rows[0::2] = w + p.uncert_frac
    rows[1::2] = p.uncert_frac - w
    return rows


def _sign_patterns(n: int) -> np.ndarray:
    """All per-step sign patterns, (2^n, n), deterministic order."""
    return np.array(list(itertools.product((-1.0, 1.0), repeat=n)))


def _extreme_disturbances(variant: str, p: QuadParams):
    """Per-variant extreme-point generator for separation candidates.

    Worst cases of the disturbed trajectories are bang-bang in the
    per-step disturbance, so the extreme points of each admissible set
    are where separation must look: plan-scaled segment endpoints for the
    coupled set, matched corners (plus one-motor axis extremes for the
    union set) for the fixed bands.  The shared-relative-error box needs
    no generator; its corners are plain box corners."""
    n = p.n_steps
    pats = _sign_patterns(n)
    band = p.uncert_frac * p.thrust_upper
    if variant == VARIANT_ESIP:

        def esip_candidates(u, gamma):
            v = np.asarray(u, dtype=float).reshape(-1)
            t = p.uncert_frac * pats
            w = np.empty((pats.shape[0], 2 * n))
            w[:, 0::2] = t * v[0::2]
            w[:, 1::2] = t * v[1::2]
            return w

        return esip_candidates
    if variant == VARIANT_SIP1:

        def sip1_candidates(u, gamma):
            fams = []
            for m1, m2 in ((1.0, 1.0), (1.0, 0.0), (0.0, 1.0)):
                w = np.empty((pats.shape[0], 2 * n))
                w[:, 0::2] = band * m1 * pats
                w[:, 1::2] = band * m2 * pats
                fams.append(w)
            return np.concatenate(fams)

        return sip1_candidates
    if variant == VARIANT_SIP2:

        def sip2_candidates(u, gamma):
            w = np.empty((pats.shape[0], 2 * n))
            w[:, 0::2] = band * pats
            w[:, 1::2] = band * pats
            return w

        return sip2_candidates
    return None


def build_variant(variant: str, p: Optional[QuadParams] = None) -> GsipProblem:
    """Assemble the robust trajectory problem for one uncertainty model.

    The esip variant couples admissibility to the decision and is meant
    for the existence-constrained loop; the other three have fixed sets
    and run through the classical loop.
    """
    if p is None:
        p = QuadParams()
    if variant not in VARIANTS:
        raise ContractViolationError(f"unknown variant {variant!r}")
    n = p.n_steps
    n_u = 2 * n
    if variant == VARIANT_RSIP:
        n_w = n
        w_box = p.uncert_frac * np.ones(n_w)
    else:
        n_w = 2 * n
        w_box = p.uncert_frac * p.thrust_upper * np.ones(n_w)

    def forward(u, w, _variant=variant):
        return simulate(u, w, _variant, p)

    def traj_cost(x, u, w):
        return cost(x, p)

    def path_rows(x, u, w):
        return path_constraint_rows(x, p)

    if variant == VARIANT_ESIP:
        admissibility = lambda x, u, w: uncertainty_rows(u, w, p)
        n_h = 6 * n
    elif variant == VARIANT_SIP1:
        admissibility = lambda x, u, w: _sip1_rows(w, p)
        n_h = 5 * n
    elif variant == VARIANT_SIP2:
        admissibility = lambda x, u, w: _sip2_rows(w, p)
        n_h = 6 * n
    else:
        admissibility = lambda x, u, w: _rsip_rows(w, p)
        n_h = 2 * n

    return GsipProblem(
        n_u=n_u,
        n_w=n_w,
        n_g=2 * n,
        n_h=n_h,
        u_lower=p.thrust_lower * np.ones(n_u),
        u_upper=p.thrust_upper * np.ones(n_u),
        w_lower=-w_box,
        w_upper=w_box,
        gamma_lower=p.gamma_lower,
        gamma_upper=p.gamma_upper,
        forward_state=forward,
        cost=traj_cost,
        constraints=path_rows,
        admissibility=admissibility,
        dynamics_residual=lambda x, u, w, _variant=variant: dynamics_residual(
            x, u, w, _variant, p
        ),
        candidate_disturbances=_extreme_disturbances(variant, p),
    )


def sample_disturbance(plan: np.ndarray, sample_index: int, seed: int,
                       p: QuadParams) -> np.ndarray:
    """One admissible additive disturbance: a shared relative error per
    step, uniform on the band, scaled by the plan.  Counter-based seeding
    makes samples order-independent."""
    v = np.asarray(plan, dtype=float).reshape(-1)
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), int(sample_index))))
    rel = rng.uniform(-p.uncert_frac, p.uncert_frac, p.n_steps)
    w = np.empty(2 * p.n_steps)
    w[0::2] = v[0::2] * rel
    w[1::2] = v[1::2] * rel
    return w


def monte_carlo(plan: np.ndarray, variant: str, n: int, seed: int,
                gamma: float, p: QuadParams) -> McReport:
    """Robustness evaluation over sampled realizations of the true
    plan-scaled set (whatever variant produced the plan).  A sample counts
    as violating when any path row exceeds 1e-9."""
    if n < 1:
        raise ContractViolationError("sample count must be >= 1")
    v = np.asarray(plan, dtype=float).reshape(-1)
    total = 0.0
    worst = -math.inf
    violations = 0
    for i in range(n):
        w = sample_disturbance(v, i, seed, p)
        traj = simulate(v, w, VARIANT_ESIP, p)
        c = cost(traj, p)
        total += c
        worst = max(worst, c)
        if float(np.max(path_constraint_rows(traj, p))) > 1e-9:
            violations += 1
    return McReport(
        samples=n,
        avg_cost=total / n,
        worst_cost=worst,
        violation_count=violations,
        gamma=float(gamma),
    )


def export_trajectories(plan: np.ndarray, disturbances: Sequence[np.ndarray],
                        path: str, p: QuadParams) -> None:
    """Write one CSV row per (sample, step) with 17 significant digits."""
    v = np.asarray(plan, dtype=float).reshape(-1)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "k", "x1", "x2", "x3", "x4", "x5", "x6"])
            for i, w in enumerate(disturbances):
                traj = simulate(v, w, VARIANT_ESIP, p)
                for k in range(p.n_steps + 1):
                    writer.writerow(
                        [i, k] + [format(float(val), ".17g") for val in traj[k]]
                    )
    except OSError as exc:
        raise OSError(f"failed writing trajectory CSV to {path}: {exc}") from exc
