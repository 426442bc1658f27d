"""Smooth NLP backend: box-constrained augmented Lagrangian with multistart.

Solves

    min f(z)  s.t.  c(z) <= 0,  lower <= z <= upper

for small dense problems (tens of variables).  Inequalities are folded into
an augmented Lagrangian; each outer round minimizes it over the box with a
projected quasi-Newton method (scipy's L-BFGS-B).  Equality constraints are
not supported; encode them as opposed inequality pairs.

Gradients default to central finite differences of the user evaluators; a
program may supply analytic ``objective_grad`` / ``constraints_jac`` slots
and they are used instead.

Multistart start points are drawn from a documented PRNG stream: start 0 is
the box midpoint (preceded by any caller-supplied warm starts), the rest are
uniform box samples from ``numpy.random.Generator(PCG64(SeedSequence(seed)))``
drawn in order.  All solves are sequential and bit-deterministic for a fixed
seed; ties between starts are broken by lower objective, then by
lexicographically smaller minimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import scipy.optimize

from .core import ContractViolationError, NumericalFailureError

__all__ = [
    "SmoothProgram",
    "SolverOptions",
    "SolverOutcome",
    "STATUS_OPTIMAL",
    "STATUS_INFEASIBLE",
    "STATUS_ITER_LIMIT",
    "STATUS_NUMERICAL_FAILURE",
    "finite_diff_gradient",
    "minimize",
    "multistart_minimize",
    "feasibility_phase",
]

STATUS_OPTIMAL = "Optimal"
STATUS_INFEASIBLE = "Infeasible"
STATUS_ITER_LIMIT = "IterLimit"
STATUS_NUMERICAL_FAILURE = "NumericalFailure"

_STATUS_RANK = {
    STATUS_OPTIMAL: 0,
    STATUS_ITER_LIMIT: 1,
    STATUS_INFEASIBLE: 2,
    STATUS_NUMERICAL_FAILURE: 3,
}

_PENALTY_CAP = 1e12

_Vec = np.ndarray


@dataclass(frozen=True)
class SmoothProgram:
    """A smooth program over a finite box.

    ``ineq_constraints`` returns the residual vector c with the convention
    c <= 0 feasible; it may have zero rows.  Evaluators must be pure and
    finite on the box.
    """

    n: int
    objective: Callable[[_Vec], float]
    ineq_constraints: Callable[[_Vec], _Vec]
    lower: _Vec
    upper: _Vec
    objective_grad: Optional[Callable[[_Vec], _Vec]] = None
    constraints_jac: Optional[Callable[[_Vec], _Vec]] = None

    def __post_init__(self):
        if self.n < 1:
            raise ContractViolationError(f"n must be >= 1, got {self.n}")
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != (self.n,) or hi.shape != (self.n,):
            raise ContractViolationError("bound shapes must match n")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ContractViolationError("box bounds must be finite")
        if np.any(lo > hi):
            raise ContractViolationError("lower bound exceeds upper bound")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)


@dataclass(frozen=True)
class SolverOptions:
    feas_tol: float = 1e-6        # accepted constraint violation
    opt_tol: float = 1e-6         # projected-gradient stationarity target
    max_outer: int = 50           # augmented-Lagrangian rounds
    max_inner: int = 500          # quasi-Newton iterations per round
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    multistart_count: int = 8
    seed: int = 0                 # 64-bit unsigned stream seed

    def __post_init__(self):
        if self.feas_tol <= 0 or self.opt_tol <= 0:
            raise ContractViolationError("tolerances must be positive")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ContractViolationError("iteration limits must be >= 1")
        if self.penalty_init <= 0 or self.penalty_growth <= 1:
            raise ContractViolationError("penalty_init > 0 and penalty_growth > 1 required")
        if self.multistart_count < 1:
            raise ContractViolationError("multistart_count must be >= 1")
        if not (0 <= self.seed < 2 ** 64):
            raise ContractViolationError("seed must fit in 64 unsigned bits")


@dataclass(frozen=True)
class SolverOutcome:
    """Result of one local solve (or the best of a multistart batch).

    ``infeasibility_trace`` records the accepted max-violation after each
    augmented-Lagrangian round; it is non-increasing by construction.
    """

    z_star: _Vec
    objective_value: float
    max_violation: float
    status: str
    stationarity: float = math.inf
    infeasibility_trace: Tuple[float, ...] = ()
    message: str = ""


def finite_diff_gradient(fn: Callable[[_Vec], float], z, h: Optional[float] = None) -> _Vec:
    """Central finite-difference gradient of a scalar function.

    With ``h`` omitted, component i uses the scaled step 1e-6 * (1 + |z_i|);
    a given ``h`` is used verbatim for every component.
    """
    z = np.asarray(z, dtype=float)
    if z.ndim != 1:
        raise ContractViolationError(f"z must be a 1-d vector, got shape {z.shape}")
    grad = np.empty(z.size)
    for i in range(z.size):
        hi = h if h is not None else 1e-6 * (1.0 + abs(z[i]))
        zp = z.copy()
        zm = z.copy()
        zp[i] += hi
        zm[i] -= hi
        fp = float(fn(zp))
        fm = float(fn(zm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericalFailureError(f"non-finite stencil value at component {i}")
        grad[i] = (fp - fm) / (2.0 * hi)
    return grad


def _clip_to_box(p: SmoothProgram, z) -> _Vec:
    z = np.asarray(z, dtype=float)
    if z.shape != (p.n,):
        raise ContractViolationError(f"start must have shape ({p.n},), got {z.shape}")
    return np.clip(z, p.lower, p.upper)


def _eval_constraints(p: SmoothProgram, z: _Vec) -> _Vec:
    c = np.asarray(p.ineq_constraints(z), dtype=float).reshape(-1)
    if not np.all(np.isfinite(c)):
        raise NumericalFailureError("constraint evaluator returned non-finite values")
    return c


def _eval_objective(p: SmoothProgram, z: _Vec) -> float:
    f = float(p.objective(z))
    if not math.isfinite(f):
        raise NumericalFailureError("objective evaluator returned a non-finite value")
    return f


def _max_violation(c: _Vec) -> float:
    return float(np.max(c, initial=0.0))


def _projected_grad_norm(p: SmoothProgram, z: _Vec, grad: _Vec) -> float:
    step = np.clip(z - grad, p.lower, p.upper) - z
    return float(np.max(np.abs(step), initial=0.0))


def minimize(p: SmoothProgram, start, opts: SolverOptions) -> SolverOutcome:
    """Augmented-Lagrangian solve from a single start point.

    A round is accepted only if it does not increase the running best
    infeasibility, so the reported trace is monotone.  Status ``Optimal``
    certifies max violation <= feas_tol and projected-gradient
    stationarity of the augmented Lagrangian <= opt_tol.
    """
    z = _clip_to_box(p, start)
    try:
        c = _eval_constraints(p, z)
    except NumericalFailureError as exc:
        return SolverOutcome(z, math.inf, math.inf, STATUS_NUMERICAL_FAILURE, message=str(exc))
    lam = np.zeros(c.size)
    rho = opts.penalty_init

    best_z = z
    best_viol = _max_violation(c)
    try:
        best_f = _eval_objective(p, z)
    except NumericalFailureError as exc:
        return SolverOutcome(z, math.inf, best_viol, STATUS_NUMERICAL_FAILURE, message=str(exc))
    best_stat = math.inf
    trace = []
    prev_viol = best_viol

    def augmented(zz: _Vec, lam: _Vec, rho: float) -> float:
        f = _eval_objective(p, zz)
        if lam.size == 0:
            return f
        cc = _eval_constraints(p, zz)
        active = np.maximum(0.0, cc + lam / rho)
        return f + 0.5 * rho * float(np.dot(active, active))

    def augmented_grad(zz: _Vec, lam: _Vec, rho: float) -> _Vec:
        if p.objective_grad is not None and p.constraints_jac is not None:
            g = np.asarray(p.objective_grad(zz), dtype=float).copy()
            if lam.size:
                cc = _eval_constraints(p, zz)
                jac = np.asarray(p.constraints_jac(zz), dtype=float)
                active = np.maximum(0.0, cc + lam / rho)
                g += rho * (active @ jac)
            return g
        return finite_diff_gradient(lambda v: augmented(v, lam, rho), zz)

    try:
        for _ in range(opts.max_outer):
            res = scipy.optimize.minimize(
                lambda v: (augmented(v, lam, rho), augmented_grad(v, lam, rho)),
                z,
                jac=True,
                method="L-BFGS-B",
                bounds=list(zip(p.lower, p.upper)),
                options=dict(maxiter=opts.max_inner, ftol=1e-14, gtol=0.1 * opts.opt_tol),
            )
            z = np.clip(res.x, p.lower, p.upper)
            c = _eval_constraints(p, z)
            viol = _max_violation(c)
            f = _eval_objective(p, z)
            stat = _projected_grad_norm(p, z, augmented_grad(z, lam, rho))

            # accept only non-worsening rounds so the trace stays monotone
            feas_now = viol <= opts.feas_tol
            feas_best = best_viol <= opts.feas_tol
            improved = (
                (feas_now and not feas_best)
                or (feas_now and feas_best and f <= best_f)
                or (not feas_now and viol <= best_viol + 1e-12)
            )
            if improved:
                best_z, best_viol, best_f, best_stat = z, viol, f, stat
            trace.append(min(best_viol, trace[-1]) if trace else best_viol)

            if viol <= opts.feas_tol and stat <= opts.opt_tol:
                return SolverOutcome(
                    z, f, viol, STATUS_OPTIMAL, stat, tuple(trace),
                )
            if lam.size:
                lam = np.maximum(0.0, lam + rho * c)
                if viol > 0.25 * prev_viol and viol > opts.feas_tol:
                    rho = min(rho * opts.penalty_growth, _PENALTY_CAP)
            prev_viol = viol
    except NumericalFailureError as exc:
        return SolverOutcome(
            best_z, best_f, best_viol, STATUS_NUMERICAL_FAILURE,
            best_stat, tuple(trace), str(exc),
        )

    if best_viol <= opts.feas_tol and best_stat <= opts.opt_tol:
        status = STATUS_OPTIMAL
    elif best_viol <= opts.feas_tol:
        status = STATUS_ITER_LIMIT
    else:
        # violation still above tolerance: decreasing means iteration budget,
        # a stalled trace means the constraints look locally unsatisfiable
        decreasing = len(trace) >= 4 and trace[-1] <= 0.9 * trace[-4]
        status = STATUS_ITER_LIMIT if decreasing else STATUS_INFEASIBLE
    return SolverOutcome(best_z, best_f, best_viol, status, best_stat, tuple(trace))


def _start_points(p: SmoothProgram, opts: SolverOptions, extra_starts: Sequence) -> list:
    starts = [_clip_to_box(p, s) for s in extra_starts]
    starts.append(0.5 * (p.lower + p.upper))
    rng = np.random.default_rng(np.random.SeedSequence(opts.seed))
    while len(starts) < max(opts.multistart_count, len(starts)):
        starts.append(rng.uniform(p.lower, p.upper))
    return starts


def _lex_less(a: _Vec, b: _Vec) -> bool:
    for x, y in zip(a, b):
        if x != y:
            return x < y
    return False


def _better_outcome(out: SolverOutcome, best: SolverOutcome) -> bool:
    rank, brank = _STATUS_RANK[out.status], _STATUS_RANK[best.status]
    if rank != brank:
        return rank < brank
    if out.status == STATUS_OPTIMAL:
        return out.objective_value < best.objective_value or (
            out.objective_value == best.objective_value
            and _lex_less(out.z_star, best.z_star)
        )
    return (out.max_violation, out.objective_value) < (
        best.max_violation, best.objective_value,
    ) or (
        out.max_violation == best.max_violation
        and out.objective_value == best.objective_value
        and _lex_less(out.z_star, best.z_star)
    )


def best_outcome(outcomes: Sequence[SolverOutcome]) -> SolverOutcome:
    """The ranked winner: status first, then objective (or violation),
    ties broken lexicographically on the iterate for determinism."""
    if not outcomes:
        raise ContractViolationError("no outcomes to rank")
    best = outcomes[0]
    for out in outcomes[1:]:
        if _better_outcome(out, best):
            best = out
    return best


def multistart_minimize(
    p: SmoothProgram,
    opts: SolverOptions,
    extra_starts: Sequence = (),
) -> SolverOutcome:
    """Best outcome over the documented multistart schedule.

    Caller-supplied warm starts are tried first (clipped to the box), then
    the box midpoint, then uniform seeded draws up to ``multistart_count``
    total.  Returns the best Optimal outcome; if no start is Optimal, the
    least-bad outcome (by status, then violation, then objective) with its
    diagnostics.
    """
    outcomes = [minimize(p, start, opts) for start in _start_points(p, opts, extra_starts)]
    return best_outcome(outcomes)


def refine_minimize(
    p: SmoothProgram,
    outcome: SolverOutcome,
    opts: SolverOptions,
    rounds: int = 4,
    gain_tol: float = 1e-8,
) -> SolverOutcome:
    """Re-run the solve from the incumbent until the objective stops
    improving (or ``rounds`` is exhausted), keeping the best near-feasible
    iterate.  Pins down the last digits of a local optimum, which callers
    relying on monotone optimal values need."""
    cur = outcome
    margin = 10.0 * opts.feas_tol
    for _ in range(rounds):
        nxt = minimize(p, cur.z_star, opts)
        gain = cur.objective_value - nxt.objective_value
        if cur.max_violation > margin:
            if nxt.max_violation < cur.max_violation:
                cur = nxt
        elif nxt.max_violation <= margin and (
            nxt.objective_value < cur.objective_value
            or (nxt.objective_value == cur.objective_value
                and _STATUS_RANK[nxt.status] < _STATUS_RANK[cur.status])
        ):
            cur = nxt
        if gain < gain_tol:
            break
    return cur


def _hinge_program(p: SmoothProgram) -> SmoothProgram:
    def hinge(z):
        c = _eval_constraints(p, z)
        active = np.maximum(0.0, c)
        return float(np.dot(active, active))

    return SmoothProgram(
        n=p.n,
        objective=hinge,
        ineq_constraints=lambda z: np.zeros(0),
        lower=p.lower,
        upper=p.upper,
    )


def _feasibility_phase_full(
    p: SmoothProgram,
    opts: SolverOptions,
    extra_starts: Sequence = (),
) -> Tuple[float, _Vec]:
    """Minimize the squared hinge of the constraints; returns the smallest
    max-violation found and the point achieving it.

    Starts follow the multistart schedule; the scan stops early once a
    residual at or below feas_tol certifies feasibility.
    """
    hinge = _hinge_program(p)
    best_resid = math.inf
    best_z = 0.5 * (p.lower + p.upper)
    for start in _start_points(p, opts, extra_starts):
        out = minimize(hinge, start, opts)
        resid = _max_violation(_eval_constraints(p, out.z_star))
        if resid < best_resid:
            best_resid, best_z = resid, out.z_star
        if best_resid <= opts.feas_tol:
            break
    return best_resid, best_z


def feasibility_phase(p: SmoothProgram, opts: SolverOptions) -> float:
    """Smallest max-violation found over the multistart schedule.

    A value at or below feas_tol means a feasible point exists (and was
    found); values well above it are the heuristic infeasibility signal
    used by the reduction loop.
    """
    resid, _ = _feasibility_phase_full(p, opts)
    return resid
