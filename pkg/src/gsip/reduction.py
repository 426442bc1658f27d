"""Local-reduction exchange loop for existence-constrained GSIPs.

The loop alternates two finite smooth problems:

* master step: minimize gamma over the decision box subject to, for every
  collected disturbance scenario, one branch of its disjunction; either all
  combined constraint rows hold at the scenario (SatisfyG) or one
  admissibility row is driven below -epsilon (RefuteAdmissibility), which
  certifies the scenario inadmissible under the new decision.
* separation step: search the currently admissible disturbance set for the
  worst existence-constrained violation sigma; a positive value yields the
  next scenario.

Termination: sigma* <= viol_tol.  Because separation keeps admissibility as
hard constraints, any disturbance it can reach has a nonnegative negation
margin, so sigma* <= viol_tol < epsilon certifies that every combined row is
within viol_tol on the admissible set.

Disjunct search policy.  The master walks the per-scenario choices depth
first: the warm assignment from the previous outer iteration is tried
before anything else, SatisfyG before any refutation, and refutation rows
in index order.  Branches whose relaxed NLP is infeasible are pruned, and
among the refutation rows of a flipped scenario the branch with the lowest
gamma wins.  Refutations are only explored for scenarios whose SatisfyG
branch is infeasible in context: unconstrained refutation search is
attracted to a degenerate family of decisions that empties the admissible
set row by row while gamma collapses to its lower bound, and the exchange
loop then stalls appending refuted scenarios forever.  Restricting
refutation to infeasibility repair keeps every iterate meaningful; the
price is that a scenario that could legally be refuted for a lower gamma
stays enforced, a conservative and deterministic choice.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    ContractViolationError,
    NEGATION_LOGICAL_MIN,
    NEGATION_PAPER_MAX,
    DecisionPoint,
    EsipProblem,
    GsipProblem,
    Scenario,
    ScenarioSet,
    negation_margin,
    violation,
)
from .nlp import (
    STATUS_OPTIMAL,
    SmoothProgram,
    SolverOptions,
    SolverOutcome,
    _feasibility_phase_full,
    best_outcome,
    minimize,
    multistart_minimize,
    refine_minimize,
)

__all__ = [
    "STATUS_CONVERGED",
    "STATUS_MASTER_INFEASIBLE",
    "STATUS_ITERATION_LIMIT",
    "DisjunctChoice",
    "SATISFY",
    "ReductionOptions",
    "SeparationResult",
    "SolveReport",
    "ExchangeMonotonicityError",
    "SeparationStagnationError",
    "master_step",
    "separation_step",
    "solve_esip",
    "solve_standard_sip",
]

STATUS_CONVERGED = "Converged"
STATUS_MASTER_INFEASIBLE = "MasterInfeasible"
STATUS_ITERATION_LIMIT = "IterationLimit"

_log = logging.getLogger(__name__)

_SIGMA_BOX = 1e6

_Vec = np.ndarray


class ExchangeMonotonicityError(RuntimeError):
    """Master values went down between outer iterations; scenario addition
    can only tighten the master, so this flags a solver defect."""


class SeparationStagnationError(RuntimeError):
    """Separation returned an already-collected scenario while still
    reporting a violation above tolerance (inner-solver stagnation)."""


@dataclass(frozen=True)
class DisjunctChoice:
    """Branch taken for one scenario in the master.

    ``kind`` is "satisfy" (every combined row <= 0 at the scenario) or
    "refute" (negation branch).  In logical_min mode a refutation carries
    the index of the admissibility row driven below -epsilon; in paper_max
    mode ``h_row`` is None and every row is driven below -epsilon.
    """

    kind: str
    h_row: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("satisfy", "refute"):
            raise ContractViolationError(f"unknown disjunct kind {self.kind!r}")
        if self.kind == "satisfy" and self.h_row is not None:
            raise ContractViolationError("satisfy choice carries no admissibility row")


SATISFY = DisjunctChoice("satisfy")

DisjunctAssignment = Tuple[DisjunctChoice, ...]


@dataclass(frozen=True)
class ReductionOptions:
    viol_tol: float = 1e-6       # separation value accepted as converged
    max_outer_iters: int = 40
    dup_tol: float = 1e-8        # scenario duplicate sup-norm tolerance
    nlp: SolverOptions = SolverOptions()
    # separation solves NLPs only for the most promising combined rows
    # (ranked by a cheap sampled sweep); the remaining rows are solved
    # before any convergence or emptiness verdict, so certificates are
    # unaffected; 0 disables screening
    screen_rows: int = 4
    # tie-break weight on the squared decision norm in the master
    # objective; collapses flat ridges of equal-bound plans to one
    # canonical (minimum-norm) plan so the exchange stops wandering and
    # equivalent problem variants select the same decision; distorts the
    # bound by at most master_reg * ||u||^2, so keep it far below the
    # bound tolerance of interest; 0 restores the exact objective
    master_reg: float = 0.0

    def __post_init__(self):
        if self.viol_tol <= 0 or self.dup_tol <= 0:
            raise ContractViolationError("tolerances must be positive")
        if self.max_outer_iters < 1:
            raise ContractViolationError("max_outer_iters must be >= 1")
        if self.screen_rows < 0:
            raise ContractViolationError("screen_rows must be >= 0")
        if self.master_reg < 0:
            raise ContractViolationError("master_reg must be >= 0")


@dataclass(frozen=True)
class SeparationResult:
    """Worst admissible disturbance found at a decision.

    ``sigma_star`` always equals the recomputed existence-constrained
    violation at ``scenario.w``.  ``active_g_row`` is the combined row whose
    sub-problem won the index enumeration.  ``admissible_set_empty`` marks
    the degenerate case where no admissible disturbance exists at all; the
    sentinel value is sigma_star = -inf.
    """

    scenario: Scenario
    sigma_star: float
    active_g_row: int
    admissible_set_empty: bool = False


@dataclass(frozen=True)
class SolveReport:
    decision: Optional[DecisionPoint]
    scenarios: ScenarioSet
    iterations: int
    sigma_history: Tuple[float, ...]
    gamma_history: Tuple[float, ...]
    status: str
    wall_time: float
    iter_wall_times: Tuple[float, ...] = ()


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _derive_seed(base: int, *parts: int) -> int:
    """Deterministic child seed for one solver call site."""
    ss = np.random.SeedSequence(entropy=(int(base),) + tuple(int(p) for p in parts))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _seeded(opts: SolverOptions, *parts: int) -> SolverOptions:
    return replace(opts, seed=_derive_seed(opts.seed, *parts))


def _bundle(prob: GsipProblem, u: _Vec, gamma: float, w: _Vec) -> Tuple[_Vec, _Vec]:
    """Combined rows and admissibility rows from a single forward pass."""
    x = prob.forward_state(u, w)
    j_val = float(prob.cost(x, u, w))
    g = np.asarray(prob.constraints(x, u, w), dtype=float)
    h = np.asarray(prob.admissibility(x, u, w), dtype=float)
    v = np.empty(prob.n_g + 1)
    v[0] = j_val - gamma
    v[1:] = g
    if not (math.isfinite(j_val) and np.all(np.isfinite(g)) and np.all(np.isfinite(h))):
        from .core import NumericalFailureError

        raise NumericalFailureError("problem evaluator returned non-finite values")
    return v, h


def _decision_box(prob: GsipProblem) -> Tuple[_Vec, _Vec]:
    lo = np.concatenate([prob.u_lower, [prob.gamma_lower]])
    hi = np.concatenate([prob.u_upper, [prob.gamma_upper]])
    return lo, hi


def _gamma_objective(z: _Vec) -> float:
    return float(z[-1])


def _master_objective(reg: float):
    if reg == 0.0:
        return _gamma_objective

    def objective(z: _Vec) -> float:
        u = z[:-1]
        return float(z[-1]) + reg * float(np.dot(u, u))

    return objective


# ---------------------------------------------------------------------------
# master step
# ---------------------------------------------------------------------------


def _master_program(
    esip: EsipProblem,
    scenarios: ScenarioSet,
    assignment: DisjunctAssignment,
    reg: float = 0.0,
) -> Tuple[SmoothProgram, List[Tuple[int, int]]]:
    """Smooth master NLP for a fixed disjunct assignment.

    Also returns per-scenario row slices of the stacked constraint vector so
    repair can attribute violations to scenarios.
    """
    prob = esip.base
    eps = esip.epsilon
    lo, hi = _decision_box(prob)
    slices: List[Tuple[int, int]] = []
    offset = 0
    for choice in assignment:
        width = (prob.n_g + 1) if choice.kind == "satisfy" else (
            1 if choice.h_row is not None else prob.n_h
        )
        slices.append((offset, offset + width))
        offset += width

    scen_ws = [s.w for s in scenarios]

    def constraints(z: _Vec) -> _Vec:
        u = z[:-1]
        gamma = float(z[-1])
        rows = np.empty(offset)
        pos = 0
        for w, choice in zip(scen_ws, assignment):
            v, h = _bundle(prob, u, gamma, w)
            if choice.kind == "satisfy":
                rows[pos:pos + prob.n_g + 1] = v
                pos += prob.n_g + 1
            elif choice.h_row is not None:
                rows[pos] = h[choice.h_row] + eps
                pos += 1
            else:
                rows[pos:pos + prob.n_h] = h + eps
                pos += prob.n_h
        return rows

    program = SmoothProgram(
        n=prob.n_u + 1,
        objective=_master_objective(reg),
        ineq_constraints=constraints,
        lower=lo,
        upper=hi,
    )
    return program, slices


def _scenario_violations(
    c: _Vec, slices: Sequence[Tuple[int, int]]
) -> List[float]:
    return [float(np.max(c[a:b], initial=-math.inf)) for a, b in slices]


def _refute_choices(prob: GsipProblem, mode: str) -> List[DisjunctChoice]:
    if mode == NEGATION_LOGICAL_MIN:
        return [DisjunctChoice("refute", j) for j in range(prob.n_h)]
    return [DisjunctChoice("refute", None)]


def _retain_bound(d: DecisionPoint,
                  start_decision: Optional[DecisionPoint]) -> DecisionPoint:
    """Keep the recorded master value non-decreasing across iterations.

    A later master solved from scratch can land in a better basin and
    return a lower bound value than the previous iteration, even though
    the true optimum sequence only climbs.  Raising the bound variable at
    a feasible point keeps it feasible (the bound only enters the
    epigraph rows and its own box), so we keep the improved plan and
    carry the previous bound forward.
    """
    if start_decision is not None and d.gamma < start_decision.gamma:
        return DecisionPoint(d.u, start_decision.gamma)
    return d


def master_step(
    esip: EsipProblem,
    scenarios: ScenarioSet,
    opts: ReductionOptions,
    warm: Optional[DisjunctAssignment] = None,
    start_decision: Optional[DecisionPoint] = None,
    iteration: int = 0,
    explore: bool = False,
) -> Tuple[Optional[DecisionPoint], DisjunctAssignment, SolverOutcome]:
    """Solve the finite master over collected scenarios.

    Walks disjunct assignments warm-first / SatisfyG-first as described in
    the module docstring.  Returns (decision, assignment, nlp outcome); a
    None decision means no explored assignment admitted a feasible NLP and
    the master is declared infeasible.
    """
    prob = esip.base
    if warm is not None and len(warm) != len(scenarios):
        raise ContractViolationError("warm assignment length must match scenario count")
    nlp_opts = opts.nlp
    assignment: DisjunctAssignment = tuple(warm) if warm is not None else tuple(
        SATISFY for _ in range(len(scenarios))
    )

    prev_z = None
    if start_decision is not None:
        prev_z = np.concatenate([start_decision.u, [start_decision.gamma]])

    if len(scenarios) == 0:
        # documented default: start the empty master at the previous decision
        # or the box midpoint with gamma at its lower bound
        program, _ = _master_program(esip, scenarios, assignment, opts.master_reg)
        if prev_z is None:
            start = np.concatenate(
                [0.5 * (prob.u_lower + prob.u_upper), [prob.gamma_lower]]
            )
        else:
            start = prev_z
        out = minimize(program, start, _seeded(nlp_opts, iteration, 0))
        d = DecisionPoint(out.z_star[:-1], float(out.z_star[-1]))
        return d, assignment, out

    infeas_threshold = 10.0 * nlp_opts.feas_tol
    visited = {assignment}
    attempts = 0
    max_attempts = len(scenarios) * (prob.n_h + 1) + 5

    while True:
        attempts += 1
        if attempts > max_attempts:
            return None, assignment, _infeasible_outcome(prob, "assignment search exhausted")
        program, slices = _master_program(esip, scenarios, assignment,
                                           opts.master_reg)
        extras = [prev_z] if prev_z is not None else []
        resid, z_feas = _feasibility_phase_full(
            program, _seeded(nlp_opts, iteration, 1, attempts), extras
        )
        if resid <= infeas_threshold:
            continuation = len(scenarios) > 1 and not explore
            out = _solve_master_nlp(
                program, _seeded(nlp_opts, iteration, 2, attempts),
                z_feas, prev_z,
                continuation=continuation,
            )
            if continuation:
                out = _certify_jump(
                    program, _seeded(nlp_opts, iteration, 6, attempts),
                    z_feas, prev_z, out,
                    None if start_decision is None else start_decision.gamma,
                )
            if out.max_violation <= infeas_threshold:
                d = DecisionPoint(out.z_star[:-1], float(out.z_star[-1]))
                return _retain_bound(d, start_decision), assignment, out

        # infeasible under this assignment: flip the worst-violated
        # SatisfyG scenario to a refutation branch, best gamma first
        c = program.ineq_constraints(z_feas)
        viols = _scenario_violations(c, slices)
        order = sorted(
            (i for i, ch in enumerate(assignment) if ch.kind == "satisfy"),
            key=lambda i: (-viols[i], i),
        )
        flipped = False
        for culprit in order:
            candidates = []
            for choice in _refute_choices(prob, esip.negation_mode):
                trial = assignment[:culprit] + (choice,) + assignment[culprit + 1:]
                if trial in visited:
                    continue
                visited.add(trial)
                t_program, _ = _master_program(esip, scenarios, trial,
                                               opts.master_reg)
                t_resid, t_zfeas = _feasibility_phase_full(
                    t_program,
                    _seeded(nlp_opts, iteration, 3, attempts, culprit,
                            0 if choice.h_row is None else choice.h_row + 1),
                    [z_feas] + extras,
                )
                if t_resid > infeas_threshold:
                    continue  # prune: refutation row unsatisfiable here
                t_out = multistart_minimize(
                    t_program,
                    _seeded(nlp_opts, iteration, 4, attempts, culprit,
                            0 if choice.h_row is None else choice.h_row + 1),
                    [t_zfeas, z_feas] + extras,
                )
                if t_out.max_violation > infeas_threshold:
                    continue
                key = (t_out.objective_value,
                       prob.n_h if choice.h_row is None else choice.h_row)
                candidates.append((key, trial, t_out, t_program))
            if candidates:
                candidates.sort(key=lambda item: item[0])
                _, assignment, best_out, best_program = candidates[0]
                # other scenarios may still be violated under the flip; if the
                # chosen NLP is clean we are done, otherwise keep repairing
                if best_out.max_violation <= infeas_threshold:
                    best_out = refine_minimize(
                        best_program, best_out,
                        _seeded(nlp_opts, iteration, 5, attempts),
                    )
                    d = DecisionPoint(best_out.z_star[:-1], float(best_out.z_star[-1]))
                    return _retain_bound(d, start_decision), assignment, best_out
                flipped = True
                break
        if not flipped:
            return None, assignment, _infeasible_outcome(
                prob, "no disjunct assignment is feasible"
            )


# a continuation master claiming a bound increase beyond this fraction of
# the previous bound is re-solved with full multistart before the claim is
# accepted; bound retention would otherwise lock in a wild value from a
# struggling local solve (observed: a fragile plan's own worst case sent a
# two-start continuation to a feasible but undescended point an order of
# magnitude above the true master optimum)
_JUMP_RECHECK_FACTOR = 0.5


def _certify_jump(
    program: SmoothProgram,
    seeded: SolverOptions,
    z_feas: _Vec,
    prev_z: Optional[_Vec],
    out: SolverOutcome,
    prev_gamma: Optional[float],
) -> SolverOutcome:
    if prev_gamma is None or not math.isfinite(out.objective_value):
        return out
    jump = float(out.z_star[-1]) - prev_gamma
    if jump <= _JUMP_RECHECK_FACTOR * max(1.0, abs(prev_gamma)):
        return out
    redo = _solve_master_nlp(program, seeded, z_feas, prev_z, continuation=False)
    return best_outcome([out, redo])


def _solve_master_nlp(
    program: SmoothProgram,
    seeded: SolverOptions,
    z_feas: _Vec,
    prev_z: Optional[_Vec],
    continuation: bool,
) -> SolverOutcome:
    """Solve one master NLP.

    Global multistart happens while no incumbent chain exists (the first
    nonempty master, or after repair changed the assignment) and again
    whenever the caller asks for exploration because the retained bound
    has stalled.  Later masters otherwise continue locally from the
    incumbent and the feasibility point; bound retention keeps the
    reported value sequence monotone either way, so a multistart landing
    in a better basin only ever helps.  Polish rounds pin down the last
    digits.
    """
    if continuation and prev_z is not None:
        starts = [z_feas]
        if float(np.max(np.abs(prev_z - z_feas))) > 1e-12:
            starts.append(prev_z)
        out = best_outcome([minimize(program, s, seeded) for s in starts])
    else:
        extras = [z_feas] if prev_z is None else [z_feas, prev_z]
        out = multistart_minimize(program, seeded, extras)
    return refine_minimize(program, out, seeded)


def _infeasible_outcome(prob: GsipProblem, message: str) -> SolverOutcome:
    lo, hi = _decision_box(prob)
    mid = 0.5 * (lo + hi)
    return SolverOutcome(
        z_star=mid,
        objective_value=math.inf,
        max_violation=math.inf,
        status="Infeasible",
        message=message,
    )


# ---------------------------------------------------------------------------
# separation step
# ---------------------------------------------------------------------------


_MAX_CANDIDATES = 4096
_CORNER_ENUM_DIM = 12


@dataclass(frozen=True)
class _CandidateSurvey:
    """Exact evaluations of the extreme-point candidate disturbances."""

    ws: Tuple[_Vec, ...]
    sigmas: _Vec          # capped separation value at each candidate
    strengths: _Vec       # raw worst combined row at each candidate
    row_max: _Vec         # per combined row, max value over candidates
    any_admissible: bool  # some candidate has every h row >= -1e-9


_EMPTY_SURVEY = _CandidateSurvey((), np.empty(0), np.empty(0), np.empty(0), False)


def _candidate_set(prob: GsipProblem, d: DecisionPoint) -> List[_Vec]:
    """Extreme disturbances to check exactly: the problem's own candidate
    generator when present, otherwise every box corner while the corner
    count stays enumerable.  Worst cases of control-style problems are
    bang-bang, so corners are where separation multistarts go blind."""
    if prob.candidate_disturbances is not None:
        cands = np.asarray(prob.candidate_disturbances(d.u, d.gamma), dtype=float)
        if cands.ndim != 2 or cands.shape[1] != prob.n_w:
            raise ContractViolationError(
                f"candidate_disturbances returned shape {cands.shape}, "
                f"expected (m, {prob.n_w})"
            )
        return [np.clip(c, prob.w_lower, prob.w_upper)
                for c in cands[:_MAX_CANDIDATES]]
    if prob.n_w <= _CORNER_ENUM_DIM:
        return [np.array(c) for c in
                itertools.product(*zip(prob.w_lower, prob.w_upper))]
    return []


def _survey_candidates(
    prob: GsipProblem,
    esip: Optional[EsipProblem],
    d: DecisionPoint,
    cands: Sequence[_Vec],
) -> _CandidateSurvey:
    """One exact forward pass per candidate.

    sigma follows the existence-constrained aggregation when ``esip`` is
    given; for a fixed disturbance set sigma is the worst combined row,
    forced to -inf when the candidate is inadmissible."""
    if not cands:
        return _EMPTY_SURVEY
    n_rows = prob.n_g + 1
    sigmas = np.empty(len(cands))
    strengths = np.empty(len(cands))
    row_max = np.full(n_rows, -math.inf)
    any_admissible = False
    for i, w in enumerate(cands):
        v, h = _bundle(prob, d.u, d.gamma, w)
        np.maximum(row_max, v, out=row_max)
        vmax = float(np.max(v))
        strengths[i] = vmax
        admissible = float(np.min(h)) >= -1e-9
        any_admissible = any_admissible or admissible
        if esip is not None:
            sigmas[i] = min(negation_margin(h, esip.negation_mode)
                            + esip.epsilon, vmax)
        else:
            sigmas[i] = vmax if admissible else -math.inf
    return _CandidateSurvey(tuple(cands), sigmas, strengths, row_max,
                            any_admissible)


def _best_candidate_cut(survey: _CandidateSurvey,
                        viol_tol: float) -> Optional[Tuple[int, float, float]]:
    """Index, sigma, strength of the strongest violating candidate.

    Choice is by raw violation magnitude, not by sigma: the capped sigma
    plateaus at epsilon on the admissible boundary, where the strongest
    cuts of plan-scaled sets live."""
    best: Optional[Tuple[int, float, float]] = None
    for i in range(len(survey.ws)):
        if survey.sigmas[i] <= viol_tol:
            continue
        if best is None or survey.strengths[i] > best[2]:
            best = (i, float(survey.sigmas[i]), float(survey.strengths[i]))
    return best


def _warm_score(prob, esip, d, w):
    """(capped sigma, raw worst row): rank by violating-ness first, then
    by how hard the violation is underneath the cap."""
    if esip is not None:
        v, h = _bundle(prob, d.u, d.gamma, w)
        vmax = float(np.max(v))
        sigma = min(negation_margin(h, esip.negation_mode) + esip.epsilon, vmax)
        return sigma, vmax
    v, _ = _bundle(prob, d.u, d.gamma, w)
    vmax = float(np.max(v))
    return vmax, vmax


def _separation_starts(
    prob: GsipProblem,
    esip: Optional[EsipProblem],
    d: DecisionPoint,
    nlp_opts: SolverOptions,
    warm_ws: Sequence[_Vec],
    with_sigma: bool,
) -> List[_Vec]:
    """Deterministic w starts: the strongest stored scenarios and extreme
    candidates (worst-case disturbances recur across iterations), the box
    midpoint, seeded draws."""
    rng = np.random.default_rng(np.random.SeedSequence(nlp_opts.seed))
    scored = []
    for i, w in enumerate(warm_ws):
        wc = np.clip(w, prob.w_lower, prob.w_upper)
        sigma, vmax = _warm_score(prob, esip, d, wc)
        scored.append(((-sigma, -vmax, i), wc))
    scored.sort(key=lambda t: t[0])
    ws = [w for _, w in scored[:3]]
    ws.append(0.5 * (prob.w_lower + prob.w_upper))
    target = max(nlp_opts.multistart_count, len(ws) + 2)
    while len(ws) < target:
        ws.append(rng.uniform(prob.w_lower, prob.w_upper))
    if not with_sigma:
        return ws
    starts = []
    for w in ws:
        sigma0 = violation(esip, d, w) if esip is not None else 0.0
        starts.append(np.concatenate([w, [sigma0]]))
    return starts


def _esip_index_program(
    esip: EsipProblem,
    d: DecisionPoint,
    row: int,
    cap_row: Optional[int],
) -> SmoothProgram:
    """Maximize sigma subject to sigma <= v_row, the negation-margin cap,
    and hard admissibility.  ``cap_row`` selects the single aggregated row
    in paper_max mode; None means every row caps (logical_min)."""
    prob = esip.base
    eps = esip.epsilon
    n_h = prob.n_h
    cap_width = n_h if cap_row is None else 1

    def constraints(z: _Vec) -> _Vec:
        w = z[:-1]
        sigma = float(z[-1])
        v, h = _bundle(prob, d.u, d.gamma, w)
        rows = np.empty(1 + cap_width + n_h)
        rows[0] = sigma - v[row]
        if cap_row is None:
            rows[1:1 + n_h] = sigma - h - eps
        else:
            rows[1] = sigma - h[cap_row] - eps
        rows[1 + cap_width:] = -h
        return rows

    lo = np.concatenate([prob.w_lower, [-_SIGMA_BOX]])
    hi = np.concatenate([prob.w_upper, [_SIGMA_BOX]])
    return SmoothProgram(
        n=prob.n_w + 1,
        objective=lambda z: -float(z[-1]),
        ineq_constraints=constraints,
        lower=lo,
        upper=hi,
    )


def _esip_polish_program(
    esip: EsipProblem,
    d: DecisionPoint,
    row: int,
    cap_row: Optional[int],
    floor: float,
) -> SmoothProgram:
    """Maximize v_row over the near-plateau of the capped objective.

    Keeps the capped value at or above ``floor`` while pushing the raw row
    violation as high as possible, which strengthens the returned scenario
    without changing the reported separation value."""
    prob = esip.base
    eps = esip.epsilon
    n_h = prob.n_h
    cap_width = n_h if cap_row is None else 1

    def objective(w: _Vec) -> float:
        v, _ = _bundle(prob, d.u, d.gamma, w)
        return -float(v[row])

    def constraints(w: _Vec) -> _Vec:
        v, h = _bundle(prob, d.u, d.gamma, w)
        rows = np.empty(1 + cap_width + n_h)
        rows[0] = floor - v[row]
        if cap_row is None:
            rows[1:1 + n_h] = (floor - eps) - h
        else:
            rows[1] = (floor - eps) - h[cap_row]
        rows[1 + cap_width:] = -h
        return rows

    return SmoothProgram(
        n=prob.n_w,
        objective=objective,
        ineq_constraints=constraints,
        lower=prob.w_lower,
        upper=prob.w_upper,
    )


def _rank_rows(
    prob: GsipProblem,
    d: DecisionPoint,
    nlp_opts: SolverOptions,
    warm_ws: Sequence[_Vec],
    n_rows: int,
    seed: int,
    extra_scores: Optional[_Vec] = None,
) -> List[int]:
    """Order combined rows by their largest value over a cheap sampled
    sweep of the disturbance box plus all stored scenarios, merged with
    the candidate-survey row maxima when given (admissibility ignored:
    the sweep only ranks, it never certifies)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    sweep = [0.5 * (prob.w_lower + prob.w_upper)]
    sweep.extend(np.clip(w, prob.w_lower, prob.w_upper) for w in warm_ws)
    sweep.extend(rng.uniform(prob.w_lower, prob.w_upper) for _ in range(14))
    scores = np.full(n_rows, -math.inf)
    for w in sweep:
        v, _ = _bundle(prob, d.u, d.gamma, w)
        np.maximum(scores, v, out=scores)
    if extra_scores is not None and extra_scores.size == n_rows:
        np.maximum(scores, extra_scores, out=scores)
    return sorted(range(n_rows), key=lambda j: (-scores[j], j))


def separation_step(
    esip: EsipProblem,
    d: DecisionPoint,
    opts: ReductionOptions,
    iteration: int = 0,
    warm_ws: Sequence[_Vec] = (),
) -> SeparationResult:
    """Worst existence-constrained violation over the admissible set at d.

    The disjunctive objective is handled by exact index enumeration: one
    smooth sub-problem per combined row (and per aggregated admissibility
    row in paper_max mode), keeping admissibility as hard constraints.
    Extreme-point candidates (box corners or the problem's own generator)
    are evaluated exactly beside the smooth solves: they steer the row
    screening, warm the multistarts, and can win the returned scenario
    outright when their raw violation is strongest.  The best smooth
    winner is polished along the objective plateau to the strongest
    scenario it contains.  If neither sub-problems nor candidates exhibit
    an admissible point the admissible set is empty and sigma* = -inf is
    returned with the ``admissible_set_empty`` flag.
    """
    prob = esip.base
    nlp_opts = opts.nlp
    n_rows = prob.n_g + 1
    cap_rows: List[Optional[int]]
    if esip.negation_mode == NEGATION_LOGICAL_MIN:
        cap_rows = [None]
    else:
        cap_rows = list(range(prob.n_h))

    survey = _survey_candidates(prob, esip, d, _candidate_set(prob, d))
    cand_cut = _best_candidate_cut(survey, opts.viol_tol)
    strong_ws = []
    if len(survey.ws):
        order = sorted(range(len(survey.ws)),
                       key=lambda i: (-survey.sigmas[i], -survey.strengths[i], i))
        strong_ws = [survey.ws[i] for i in order[:3]]
    all_warm = list(warm_ws) + strong_ws

    best: Optional[Tuple[float, float, int, _Vec]] = None  # sigma, vmax, row, w
    any_feasible = survey.any_admissible
    fallback_w = 0.5 * (prob.w_lower + prob.w_upper)

    def solve_rows(rows: Sequence[int]) -> None:
        nonlocal best
        for row in rows:
            for cap_row in cap_rows:
                seeded = _seeded(nlp_opts, iteration, 10, row,
                                 0 if cap_row is None else cap_row + 1)
                starts = _separation_starts(prob, esip, d, seeded, all_warm,
                                            with_sigma=True)
                program = _esip_index_program(esip, d, row, cap_row)
                out = multistart_minimize(program, seeded, starts)
                if out.max_violation > 10.0 * nlp_opts.feas_tol:
                    continue  # no admissible point reached for this index
                w_cand = out.z_star[:-1]
                sigma = violation(esip, d, w_cand)
                v, _ = _bundle(prob, d.u, d.gamma, w_cand)
                key = (sigma, float(np.max(v)), -row)
                if best is None or key > (best[0], best[1], -best[2]):
                    best = (sigma, float(np.max(v)), row, w_cand)

    def smooth_feasible() -> bool:
        return best is not None

    ordered = _rank_rows(prob, d, nlp_opts, all_warm, n_rows,
                         _derive_seed(nlp_opts.seed, iteration, 12),
                         extra_scores=survey.row_max if len(survey.ws) else None)
    if 0 < opts.screen_rows < n_rows:
        solve_rows(ordered[:opts.screen_rows])
        # a sub-tolerance (or empty) screened verdict needs the full sweep
        if best is None or best[0] <= opts.viol_tol:
            solve_rows(ordered[opts.screen_rows:])
    else:
        solve_rows(ordered)

    any_feasible = any_feasible or smooth_feasible() or cand_cut is not None
    if not any_feasible:
        scenario = Scenario(fallback_w, iteration, -math.inf)
        return SeparationResult(scenario, -math.inf, 0, admissible_set_empty=True)

    if best is None:
        # candidates alone witnessed the set; report their best sigma
        idx = int(np.argmax(survey.sigmas))
        w_star = survey.ws[idx]
        sigma_star = float(survey.sigmas[idx])
        v, _ = _bundle(prob, d.u, d.gamma, w_star)
        best = (sigma_star, float(np.max(v)), int(np.argmax(v)), w_star)

    sigma_star, vmax_star, active_row, w_star = best

    if sigma_star > opts.viol_tol:
        # plateau polish: same separation value, strongest raw violation
        cap_row = None
        if esip.negation_mode == NEGATION_PAPER_MAX:
            # recover the aggregated row that certified the winner
            _, h = _bundle(prob, d.u, d.gamma, w_star)
            cap_row = int(np.argmax(h))
        polish = _esip_polish_program(
            esip, d, active_row, cap_row, sigma_star - 1e-8
        )
        p_out = minimize(polish, w_star, _seeded(nlp_opts, iteration, 11, active_row))
        if p_out.status == STATUS_OPTIMAL:
            sigma_polished = violation(esip, d, p_out.z_star)
            if sigma_polished >= sigma_star - 1e-8:
                v, _ = _bundle(prob, d.u, d.gamma, p_out.z_star)
                sigma_star, w_star = sigma_polished, p_out.z_star
                vmax_star = float(np.max(v))

    # the reported value is the best sigma seen anywhere; the returned
    # scenario is the strongest violating cut, which on capped plateaus is
    # often an extreme candidate rather than the smooth winner
    smooth_violates = sigma_star > opts.viol_tol
    if cand_cut is not None:
        sigma_star = max(sigma_star, cand_cut[1])
        if not smooth_violates or cand_cut[2] > vmax_star:
            scenario = Scenario(np.asarray(survey.ws[cand_cut[0]]), iteration,
                                cand_cut[1])
            return SeparationResult(scenario, sigma_star, active_row)
    scenario = Scenario(np.asarray(w_star), iteration, sigma_star)
    return SeparationResult(scenario, sigma_star, active_row)


# ---------------------------------------------------------------------------
# exchange loops
# ---------------------------------------------------------------------------


def _check_monotone(gamma_history: Sequence[float]) -> None:
    for a, b in zip(gamma_history, gamma_history[1:]):
        if b < a - 1e-6:
            raise ExchangeMonotonicityError(
                f"master value dropped from {a} to {b}; scenario addition "
                "can only tighten the master"
            )


def solve_esip(esip: EsipProblem, opts: ReductionOptions) -> SolveReport:
    """Run the exchange loop on an existence-constrained GSIP.

    Statuses: Converged (separation value <= viol_tol), MasterInfeasible
    (no disjunct assignment admits a feasible master), IterationLimit.
    Deterministic for a fixed options seed.
    """
    if opts.viol_tol >= esip.epsilon:
        raise ContractViolationError(
            f"viol_tol {opts.viol_tol} must be below epsilon {esip.epsilon}; "
            "convergence is only a feasibility certificate below the margin"
        )
    t0 = time.perf_counter()
    scen = ScenarioSet()
    warm: Optional[DisjunctAssignment] = None
    prev_d: Optional[DecisionPoint] = None
    gamma_history: List[float] = []
    sigma_history: List[float] = []
    iter_walls: List[float] = []
    status = STATUS_ITERATION_LIMIT
    decision: Optional[DecisionPoint] = None
    stall = 0

    for k in range(opts.max_outer_iters):
        it0 = time.perf_counter()
        explore = stall >= 2
        d, assignment, _ = master_step(
            esip, scen, opts, warm=warm, start_decision=prev_d, iteration=k,
            explore=explore,
        )
        if d is None:
            status = STATUS_MASTER_INFEASIBLE
            iter_walls.append(time.perf_counter() - it0)
            break
        decision = d
        gamma_history.append(d.gamma)
        _check_monotone(gamma_history)
        if explore:
            stall = 0
        if len(gamma_history) >= 2 and gamma_history[-1] <= gamma_history[-2] + 1e-9:
            stall += 1
        else:
            stall = 0

        warm_ws = [sc.w for sc in scen]
        sep = separation_step(esip, d, opts, iteration=k + 1, warm_ws=warm_ws)
        sigma_history.append(sep.sigma_star)
        iter_walls.append(time.perf_counter() - it0)
        _log.info("iter %d: scenarios=%d gamma=%.8f sigma=%.3e wall=%.1fs%s",
                  k + 1, len(scen), d.gamma, sep.sigma_star, iter_walls[-1],
                  " explore" if explore else "")

        if sep.sigma_star <= opts.viol_tol:
            status = STATUS_CONVERGED
            break
        if scen.contains_close(sep.scenario.w, opts.dup_tol):
            raise SeparationStagnationError(
                f"separation returned a duplicate scenario {sep.scenario.w!r} "
                f"with sigma {sep.sigma_star:.3e} > viol_tol {opts.viol_tol:.1e}; "
                "inner solver is stagnating"
            )
        scen = scen.add(sep.scenario, opts.dup_tol)
        warm = assignment + (SATISFY,)
        prev_d = d

    iterations = len(iter_walls)
    return SolveReport(
        decision=decision,
        scenarios=scen,
        iterations=iterations,
        sigma_history=tuple(sigma_history),
        gamma_history=tuple(gamma_history),
        status=status,
        wall_time=time.perf_counter() - t0,
        iter_wall_times=tuple(iter_walls),
    )


# ---------------------------------------------------------------------------
# standard SIP path (fixed disturbance set)
# ---------------------------------------------------------------------------


def _standard_master_program(prob: GsipProblem, scenarios: ScenarioSet,
                             reg: float = 0.0) -> SmoothProgram:
    lo, hi = _decision_box(prob)
    scen_ws = [s.w for s in scenarios]
    n_rows = prob.n_g + 1

    def constraints(z: _Vec) -> _Vec:
        u = z[:-1]
        gamma = float(z[-1])
        rows = np.empty(n_rows * len(scen_ws))
        for i, w in enumerate(scen_ws):
            v, _ = _bundle(prob, u, gamma, w)
            rows[i * n_rows:(i + 1) * n_rows] = v
        return rows

    return SmoothProgram(
        n=prob.n_u + 1,
        objective=_master_objective(reg),
        ineq_constraints=constraints,
        lower=lo,
        upper=hi,
    )


def _standard_row_program(prob: GsipProblem, d: DecisionPoint, row: int) -> SmoothProgram:
    def objective(w: _Vec) -> float:
        v, _ = _bundle(prob, d.u, d.gamma, w)
        return -float(v[row])

    def constraints(w: _Vec) -> _Vec:
        _, h = _bundle(prob, d.u, d.gamma, w)
        return -h

    return SmoothProgram(
        n=prob.n_w,
        objective=objective,
        ineq_constraints=constraints,
        lower=prob.w_lower,
        upper=prob.w_upper,
    )


def _check_fixed_admissibility(prob: GsipProblem) -> None:
    rng = np.random.default_rng(np.random.SeedSequence(20260822))
    for _ in range(2):
        w = rng.uniform(prob.w_lower, prob.w_upper)
        u1 = rng.uniform(prob.u_lower, prob.u_upper)
        u2 = rng.uniform(prob.u_lower, prob.u_upper)
        h1 = prob.admissibility(prob.forward_state(u1, w), u1, w)
        h2 = prob.admissibility(prob.forward_state(u2, w), u2, w)
        if not np.allclose(np.asarray(h1), np.asarray(h2), rtol=0.0, atol=1e-12):
            raise ContractViolationError(
                "standard SIP requires a decision-independent disturbance set"
            )


def solve_standard_sip(prob: GsipProblem, opts: ReductionOptions) -> SolveReport:
    """Classical exchange loop for a SIP with a fixed disturbance set.

    The master enforces every combined row at every scenario; separation
    maximizes each combined row over the set by one smooth sub-problem per
    row and returns the best.  Statuses as in ``solve_esip``.
    """
    _check_fixed_admissibility(prob)
    t0 = time.perf_counter()
    scen = ScenarioSet()
    prev_d: Optional[DecisionPoint] = None
    gamma_history: List[float] = []
    sigma_history: List[float] = []
    iter_walls: List[float] = []
    status = STATUS_ITERATION_LIMIT
    decision: Optional[DecisionPoint] = None
    nlp_opts = opts.nlp
    infeas_threshold = 10.0 * nlp_opts.feas_tol
    stall = 0

    for k in range(opts.max_outer_iters):
        it0 = time.perf_counter()
        explore = stall >= 2
        program = _standard_master_program(prob, scen, opts.master_reg)
        extras = []
        if prev_d is not None:
            extras.append(np.concatenate([prev_d.u, [prev_d.gamma]]))
        if len(scen) == 0:
            start = extras[0] if extras else np.concatenate(
                [0.5 * (prob.u_lower + prob.u_upper), [prob.gamma_lower]]
            )
            out = minimize(program, start, _seeded(nlp_opts, k, 0))
        else:
            resid, z_feas = _feasibility_phase_full(
                program, _seeded(nlp_opts, k, 1), extras
            )
            if resid > infeas_threshold:
                status = STATUS_MASTER_INFEASIBLE
                iter_walls.append(time.perf_counter() - it0)
                break
            continuation = len(scen) > 1 and not explore
            out = _solve_master_nlp(
                program, _seeded(nlp_opts, k, 2), z_feas,
                extras[0] if extras else None,
                continuation=continuation,
            )
            if continuation:
                out = _certify_jump(
                    program, _seeded(nlp_opts, k, 6), z_feas,
                    extras[0] if extras else None, out,
                    None if prev_d is None else prev_d.gamma,
                )
            if out.max_violation > infeas_threshold:
                status = STATUS_MASTER_INFEASIBLE
                iter_walls.append(time.perf_counter() - it0)
                break
        d = _retain_bound(
            DecisionPoint(out.z_star[:-1], float(out.z_star[-1])), prev_d
        )
        decision = d
        gamma_history.append(d.gamma)
        _check_monotone(gamma_history)
        if explore:
            stall = 0
        if len(gamma_history) >= 2 and gamma_history[-1] <= gamma_history[-2] + 1e-9:
            stall += 1
        else:
            stall = 0

        warm_ws = [sc.w for sc in scen]
        survey = _survey_candidates(prob, None, d, _candidate_set(prob, d))
        best_sigma = -math.inf
        best_row = 0
        best_w = 0.5 * (prob.w_lower + prob.w_upper)
        n_rows = prob.n_g + 1
        if len(survey.ws):
            order = sorted(range(len(survey.ws)),
                           key=lambda i: (-survey.sigmas[i], i))
            warm_ws = warm_ws + [survey.ws[i] for i in order[:3]]
            idx = order[0]
            if math.isfinite(survey.sigmas[idx]):
                best_sigma = float(survey.sigmas[idx])
                best_w = survey.ws[idx]
                v, _ = _bundle(prob, d.u, d.gamma, best_w)
                best_row = int(np.argmax(v))

        def solve_rows(rows):
            nonlocal best_sigma, best_row, best_w
            for row in rows:
                seeded = _seeded(nlp_opts, k, 10, row)
                starts = _separation_starts(prob, None, d, seeded, warm_ws,
                                            with_sigma=False)
                row_out = multistart_minimize(
                    _standard_row_program(prob, d, row), seeded, starts
                )
                if row_out.max_violation > infeas_threshold:
                    continue
                v, _ = _bundle(prob, d.u, d.gamma, row_out.z_star)
                sigma = float(np.max(v))
                if sigma > best_sigma:
                    best_sigma, best_row, best_w = sigma, row, row_out.z_star

        ordered = _rank_rows(prob, d, nlp_opts, warm_ws, n_rows,
                             _derive_seed(nlp_opts.seed, k, 12),
                             extra_scores=survey.row_max if len(survey.ws) else None)
        if 0 < opts.screen_rows < n_rows:
            solve_rows(ordered[:opts.screen_rows])
            if best_sigma <= opts.viol_tol:
                solve_rows(ordered[opts.screen_rows:])
        else:
            solve_rows(ordered)
        sigma_history.append(best_sigma)
        iter_walls.append(time.perf_counter() - it0)
        _log.info("iter %d: scenarios=%d gamma=%.8f sigma=%.3e wall=%.1fs%s",
                  k + 1, len(scen), d.gamma, best_sigma, iter_walls[-1],
                  " explore" if explore else "")

        if best_sigma <= opts.viol_tol:
            status = STATUS_CONVERGED
            break
        if scen.contains_close(best_w, opts.dup_tol):
            raise SeparationStagnationError(
                f"separation returned a duplicate scenario {best_w!r} "
                f"with sigma {best_sigma:.3e} > viol_tol {opts.viol_tol:.1e}; "
                "inner solver is stagnating"
            )
        scen = scen.add(Scenario(np.asarray(best_w), k + 1, best_sigma), opts.dup_tol)
        prev_d = d

    iterations = len(iter_walls)
    return SolveReport(
        decision=decision,
        scenarios=scen,
        iterations=iterations,
        sigma_history=tuple(sigma_history),
        gamma_history=tuple(gamma_history),
        status=status,
        wall_time=time.perf_counter() - t0,
        iter_wall_times=tuple(iter_walls),
    )
