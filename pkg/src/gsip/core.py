"""Problem types and the existence-constrained transformation.

A generalized semi-infinite program (GSIP) here is

    min_{u in U, gamma in G}  gamma
    s.t.  g(X(u,w), u, w) <= 0  and  J(X(u,w), u, w) <= gamma
          for all w in Y(u) = { w : h(X(u,w), u, w) >= 0 },

where the admissible disturbance set Y(u) may depend on the decision u.
The decision is augmented with an epigraph variable gamma that upper-bounds
the worst-case cost, so every semi-infinite requirement is a row of one
"combined constraint" vector v with

    v_0 = J - gamma,    v_j = g_j  (j = 1..n_g),

and feasibility at a disturbance means max_j v_j <= 0.

The existence-constrained form replaces the implication
"w admissible  implies  v <= 0" by a disjunction over a 2-point simplex:
either some admissibility row is driven below -epsilon (the disturbance is
refuted), or all combined rows hold.  Because the simplex-weighted value is
affine in the weights, its minimum over the simplex is attained at a vertex,
which collapses the disjunction to

    min( negation_margin(h) + epsilon,  max_j v_j )  <= 0.

Two aggregation modes for the refutation branch are supported:

* ``logical_min``  - margin = min_j h_j.  One violated admissibility row
  refutes the disturbance.  This is the true logical negation and the
  default.
* ``paper_max``    - margin = max_j h_j.  Refutation requires every row to
  be below -epsilon, a strictly stronger demand.  With equalities encoded
  as opposed inequality pairs this branch can never fire; the mode is kept
  for comparison runs.

All types are immutable; evaluators are expected to be pure functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "ContractViolationError",
    "NumericalFailureError",
    "NEGATION_LOGICAL_MIN",
    "NEGATION_PAPER_MAX",
    "NEGATION_MODES",
    "SimplexWeight",
    "Scenario",
    "ScenarioSet",
    "DecisionPoint",
    "GsipProblem",
    "EsipProblem",
    "combined_constraints",
    "admissibility_values",
    "negation_margin",
    "lambda_smoothed_value",
    "violation",
    "build_esip",
]


class ContractViolationError(ValueError):
    """An argument broke a declared interface contract (shape, bounds, range)."""


class NumericalFailureError(ArithmeticError):
    """An evaluator produced a non-finite value."""


#: Refute a disturbance when ANY admissibility row is below -epsilon.
NEGATION_LOGICAL_MIN = "logical_min"
#: Refute a disturbance only when EVERY admissibility row is below -epsilon.
NEGATION_PAPER_MAX = "paper_max"

NEGATION_MODES = (NEGATION_LOGICAL_MIN, NEGATION_PAPER_MAX)

_Vec = np.ndarray


def _as_vector(x, name: str, length: Optional[int] = None) -> _Vec:
    v = np.asarray(x, dtype=float)
    if v.ndim != 1:
        raise ContractViolationError(f"{name} must be a 1-d vector, got shape {v.shape}")
    if length is not None and v.size != length:
        raise ContractViolationError(f"{name} must have length {length}, got {v.size}")
    return v


def _require_finite(x, name: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericalFailureError(f"{name} is not finite: {x!r}")


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimplexWeight:
    """A point (l1, l2) on the 2-point probability simplex."""

    l1: float
    l2: float

    def __post_init__(self):
        if not (math.isfinite(self.l1) and math.isfinite(self.l2)):
            raise ContractViolationError("simplex weights must be finite")
        if self.l1 < 0.0 or self.l2 < 0.0 or abs(self.l1 + self.l2 - 1.0) > 1e-12:
            raise ContractViolationError(
                f"({self.l1}, {self.l2}) is not on the simplex: "
                "weights must be nonnegative and sum to 1 within 1e-12"
            )


@dataclass(frozen=True)
class Scenario:
    """One disturbance collected by the exchange loop.

    ``found_at_iteration`` is the outer iteration that produced it and
    ``violation_at_discovery`` the separation value at that time; both are
    bookkeeping only and do not affect solves.
    """

    w: _Vec
    found_at_iteration: int = 0
    violation_at_discovery: float = 0.0

    def __post_init__(self):
        w = _as_vector(self.w, "scenario w")
        _require_finite(w, "scenario w")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)


@dataclass(frozen=True)
class ScenarioSet:
    """Ordered, duplicate-free collection of scenarios.

    Grown one scenario per outer iteration; ``add`` returns a new set and
    rejects any w within ``dup_tol`` (sup norm) of an existing member.
    """

    scenarios: Tuple[Scenario, ...] = ()

    def __len__(self) -> int:
        return len(self.scenarios)

    def __iter__(self):
        return iter(self.scenarios)

    def __getitem__(self, i: int) -> Scenario:
        return self.scenarios[i]

    def contains_close(self, w, dup_tol: float) -> bool:
        w = _as_vector(w, "w")
        return any(
            s.w.size == w.size and float(np.max(np.abs(s.w - w))) <= dup_tol
            for s in self.scenarios
        )

    def add(self, scenario: Scenario, dup_tol: float = 1e-8) -> "ScenarioSet":
        if self.contains_close(scenario.w, dup_tol):
            raise ContractViolationError(
                f"scenario {scenario.w!r} duplicates an existing member within {dup_tol}"
            )
        return ScenarioSet(self.scenarios + (scenario,))


@dataclass(frozen=True)
class DecisionPoint:
    """A decision u together with its epigraph value gamma."""

    u: _Vec
    gamma: float

    def __post_init__(self):
        u = _as_vector(self.u, "decision u")
        _require_finite(u, "decision u")
        if not math.isfinite(self.gamma):
            raise NumericalFailureError(f"gamma is not finite: {self.gamma}")
        u.setflags(write=False)
        object.__setattr__(self, "u", u)


@dataclass(frozen=True)
class GsipProblem:
    """A GSIP instance defined by pure evaluators.

    The forward state x = forward_state(u, w) is treated opaquely by this
    module and passed through to the cost / constraint / admissibility
    evaluators.  Constraint convention: g <= 0 must hold on the admissible
    set; admissibility convention: w is admissible iff h >= 0 componentwise.

    ``w_lower``/``w_upper`` give a compact box that contains every
    admissible disturbance for every decision in the box; separation
    searches need it even though admissibility itself is expressed via h.

    ``dynamics_residual`` is an optional validation hook returning the
    defect of the discretized dynamics at a forward state; solvers never
    call it.

    ``candidate_disturbances`` optionally maps a decision (u, gamma) to an
    (m, n_w) array of extreme disturbances worth checking during
    separation, for sets whose extreme points the box cannot express
    (plan-scaled or high-dimensional sets).  Purely a completeness aid
    for multimodal landscapes: every candidate is re-evaluated exactly,
    so a wrong or empty list degrades search quality, never correctness.
    """

    n_u: int
    n_w: int
    n_g: int
    n_h: int
    u_lower: _Vec
    u_upper: _Vec
    w_lower: _Vec
    w_upper: _Vec
    gamma_lower: float
    gamma_upper: float
    forward_state: Callable[[_Vec, _Vec], _Vec]
    cost: Callable[[_Vec, _Vec, _Vec], float]
    constraints: Callable[[_Vec, _Vec, _Vec], _Vec]
    admissibility: Callable[[_Vec, _Vec, _Vec], _Vec]
    dynamics_residual: Optional[Callable[[_Vec, _Vec, _Vec], _Vec]] = None
    candidate_disturbances: Optional[Callable[[_Vec, float], _Vec]] = None

    def __post_init__(self):
        for n, name in ((self.n_u, "n_u"), (self.n_w, "n_w"), (self.n_h, "n_h")):
            if n < 1:
                raise ContractViolationError(f"{name} must be >= 1, got {n}")
        if self.n_g < 0:
            raise ContractViolationError(f"n_g must be >= 0, got {self.n_g}")
        for name, vec, n in (
            ("u_lower", self.u_lower, self.n_u),
            ("u_upper", self.u_upper, self.n_u),
            ("w_lower", self.w_lower, self.n_w),
            ("w_upper", self.w_upper, self.n_w),
        ):
            v = _as_vector(vec, name, n)
            _require_finite(v, name)
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        if np.any(self.u_lower > self.u_upper):
            raise ContractViolationError("u_lower exceeds u_upper")
        if np.any(self.w_lower > self.w_upper):
            raise ContractViolationError("w_lower exceeds w_upper")
        if not (self.gamma_lower <= self.gamma_upper):
            raise ContractViolationError("gamma bounds are empty")


@dataclass(frozen=True)
class EsipProblem:
    """A GSIP paired with the relaxation width and negation mode of its
    existence-constrained form."""

    base: GsipProblem
    epsilon: float = 1e-3
    negation_mode: str = NEGATION_LOGICAL_MIN

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon > 0.0):
            raise ContractViolationError(f"epsilon must be positive, got {self.epsilon}")
        if self.negation_mode not in NEGATION_MODES:
            raise ContractViolationError(
                f"negation_mode must be one of {NEGATION_MODES}, got {self.negation_mode!r}"
            )


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def _forward(prob: GsipProblem, u: _Vec, w: _Vec) -> _Vec:
    x = prob.forward_state(u, w)
    return x


def _combined_from_state(prob: GsipProblem, x, d: DecisionPoint, w: _Vec) -> _Vec:
    j_val = float(prob.cost(x, d.u, w))
    if not math.isfinite(j_val):
        raise NumericalFailureError(f"cost evaluator returned {j_val}")
    g = _as_vector(prob.constraints(x, d.u, w), "constraints output", prob.n_g)
    _require_finite(g, "constraints output")
    v = np.empty(prob.n_g + 1)
    v[0] = j_val - d.gamma
    v[1:] = g
    return v


def combined_constraints(prob: GsipProblem, d: DecisionPoint, w) -> _Vec:
    """Evaluate the combined constraint vector v at (d, w).

    Row 0 is the epigraph row cost - gamma; rows 1..n_g are the path
    constraints g.  Feasibility at w means max_j v_j <= 0.
    """
    w = _as_vector(w, "w", prob.n_w)
    _require_finite(w, "w")
    if d.u.size != prob.n_u:
        raise ContractViolationError(f"decision has {d.u.size} entries, expected {prob.n_u}")
    x = _forward(prob, d.u, w)
    return _combined_from_state(prob, x, d, w)


def admissibility_values(prob: GsipProblem, u, w) -> _Vec:
    """Evaluate the admissibility rows h at (u, w); w is admissible iff all >= 0."""
    u = _as_vector(u, "u", prob.n_u)
    w = _as_vector(w, "w", prob.n_w)
    _require_finite(u, "u")
    _require_finite(w, "w")
    x = _forward(prob, u, w)
    h = _as_vector(prob.admissibility(x, u, w), "admissibility output", prob.n_h)
    _require_finite(h, "admissibility output")
    return h


def negation_margin(hvals, mode: str) -> float:
    """Aggregate admissibility rows for the refutation branch.

    logical_min returns min_j h_j (one row below -epsilon refutes);
    paper_max returns max_j h_j (every row must be below -epsilon).
    """
    h = _as_vector(hvals, "hvals")
    if h.size == 0:
        raise ContractViolationError("hvals must be non-empty")
    _require_finite(h, "hvals")
    if mode == NEGATION_LOGICAL_MIN:
        return float(np.min(h))
    if mode == NEGATION_PAPER_MAX:
        return float(np.max(h))
    raise ContractViolationError(f"unknown negation mode {mode!r}")


def lambda_smoothed_value(lam: SimplexWeight, hvals, gvals, epsilon: float, mode: str) -> float:
    """Simplex-weighted disjunction value
    l1 * (negation_margin(h) + epsilon) + l2 * max_j g_j.

    Affine in (l1, l2), so its minimum over the simplex sits at a vertex;
    ``violation`` evaluates exactly that minimum.
    """
    if not (math.isfinite(epsilon) and epsilon > 0.0):
        raise ContractViolationError(f"epsilon must be positive, got {epsilon}")
    g = _as_vector(gvals, "gvals")
    if g.size == 0:
        raise ContractViolationError("gvals must be non-empty")
    _require_finite(g, "gvals")
    margin = negation_margin(hvals, mode)
    return lam.l1 * (margin + epsilon) + lam.l2 * float(np.max(g))


def violation(esip: EsipProblem, d: DecisionPoint, w) -> float:
    """Existence-constrained violation sigma(d, w).

    sigma = min( negation_margin(h) + epsilon, max_j v_j ); the point (d, w)
    satisfies the existence constraint iff sigma <= 0.
    """
    prob = esip.base
    w = _as_vector(w, "w", prob.n_w)
    _require_finite(w, "w")
    x = _forward(prob, d.u, w)
    v = _combined_from_state(prob, x, d, w)
    h = _as_vector(prob.admissibility(x, d.u, w), "admissibility output", prob.n_h)
    _require_finite(h, "admissibility output")
    margin = negation_margin(h, esip.negation_mode)
    return min(margin + esip.epsilon, float(np.max(v)))


def build_esip(
    prob: GsipProblem,
    epsilon: float = 1e-3,
    mode: str = NEGATION_LOGICAL_MIN,
) -> EsipProblem:
    """Wrap a GSIP in its existence-constrained form."""
    return EsipProblem(base=prob, epsilon=epsilon, negation_mode=mode)
