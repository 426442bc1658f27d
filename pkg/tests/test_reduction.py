"""Tests for the master/separation steps and the exchange loops.

Covers:
  * end-to-end solve of the scalar benchmark problem against a grid oracle
    (feasible-set optimum u*=0.5, objective -0.5)
  * separation values at fixed decisions against dense-grid evaluation of
    the exact violation function
  * trivial convergence with zero scenarios, empty admissible set handling
  * master repair: SatisfyG infeasible forces a refutation branch
  * determinism, warm starts, monotone master values, duplicate-scenario
    abort diagnostics
  * the classical fixed-set loop including its decision-independence check
"""

import dataclasses
import math

import numpy as np
import pytest

import gsip.reduction as reduction
from gsip import (
    ContractViolationError,
    DecisionPoint,
    GsipProblem,
    ReductionOptions,
    Scenario,
    ScenarioSet,
    SeparationResult,
    SolverOptions,
    build_esip,
    build_toy_problem,
    master_step,
    separation_step,
    solve_esip,
    solve_standard_sip,
)
from gsip.reduction import (
    SATISFY,
    STATUS_CONVERGED,
    STATUS_ITERATION_LIMIT,
    STATUS_MASTER_INFEASIBLE,
    DisjunctChoice,
    SeparationStagnationError,
)


def _opts(**kw):
    nlp = kw.pop("nlp", SolverOptions(feas_tol=1e-8, opt_tol=1e-7,
                                      multistart_count=6, seed=3))
    base = dict(viol_tol=1e-6, max_outer_iters=40, nlp=nlp)
    base.update(kw)
    return ReductionOptions(**base)


def _toy_esip(epsilon=1e-3, **kw):
    return build_esip(build_toy_problem(), epsilon=epsilon, **kw)


# ---------------------------------------------------------------------------
# separation against the grid oracle
# ---------------------------------------------------------------------------


def test_separation_matches_grid_at_slack_decision():
    # grid oracle: sigma* = -0.1 (largest admissible epigraph slack)
    esip = _toy_esip()
    d = DecisionPoint(np.array([0.2]), -0.1)
    sep = separation_step(esip, d, _opts())
    assert not sep.admissible_set_empty
    assert sep.sigma_star == pytest.approx(-0.1, abs=1e-6)


def test_separation_matches_grid_at_violated_decision():
    # continuum maximum: rows w-0.5 and (1-w)+1e-3 cross at w=0.7505
    # where sigma = 0.2505; the 401-point grid lower bound is 0.25.
    # The returned scenario is the strongest violating cut, which here is
    # the admissible-boundary corner w=1 (row value 0.5, sigma capped at
    # epsilon), not the sigma maximizer.
    esip = _toy_esip()
    d = DecisionPoint(np.array([1.0]), -1.0)
    sep = separation_step(esip, d, _opts())
    assert sep.sigma_star >= 0.25 - 1e-9
    assert sep.sigma_star == pytest.approx(0.2505, abs=5e-4)
    assert sep.scenario.w[0] == pytest.approx(1.0, abs=1e-9)
    assert sep.scenario.violation_at_discovery == pytest.approx(1e-3, abs=1e-9)
    assert sep.active_g_row == 1


def test_separation_sigma_is_recomputed_violation():
    from gsip import violation

    esip = _toy_esip()
    d = DecisionPoint(np.array([0.8]), -0.9)
    sep = separation_step(esip, d, _opts())
    assert sep.sigma_star == violation(esip, d, sep.scenario.w)


def test_separation_empty_admissible_set():
    # admissibility -1-w is negative on the whole box: no admissible w
    prob = GsipProblem(
        n_u=1, n_w=1, n_g=1, n_h=1,
        u_lower=np.zeros(1), u_upper=np.ones(1),
        w_lower=np.zeros(1), w_upper=np.ones(1),
        gamma_lower=-1.0, gamma_upper=0.0,
        forward_state=lambda u, w: np.empty(0),
        cost=lambda x, u, w: -float(u[0]),
        constraints=lambda x, u, w: np.array([w[0] - 0.5]),
        admissibility=lambda x, u, w: np.array([-1.0 - w[0]]),
    )
    esip = build_esip(prob, epsilon=1e-3)
    sep = separation_step(esip, DecisionPoint(np.array([0.5]), -0.5), _opts())
    assert sep.admissible_set_empty
    assert sep.sigma_star == -math.inf


# ---------------------------------------------------------------------------
# master step
# ---------------------------------------------------------------------------


def test_master_empty_scenarios_returns_gamma_floor():
    esip = _toy_esip()
    d, assignment, out = master_step(esip, ScenarioSet(), _opts())
    assert assignment == ()
    assert d.gamma == pytest.approx(-1.0, abs=1e-8)
    assert d.u[0] == pytest.approx(0.5, abs=1e-8)  # documented midpoint start


def test_master_satisfiable_scenario_stays_enforced():
    esip = _toy_esip()
    scen = ScenarioSet().add(Scenario(np.array([0.3]), 1, 0.1))
    d, assignment, out = master_step(esip, scen, _opts())
    assert assignment == (SATISFY,)
    # enforcing g(0.3)<=0 costs nothing; epigraph drives gamma to -u = -1
    assert d.u[0] == pytest.approx(1.0, abs=1e-6)
    assert d.gamma == pytest.approx(-1.0, abs=1e-6)


def test_master_repairs_unsatisfiable_scenario_by_refutation():
    # g(0.75)=0.25>0 for every decision, so SatisfyG is infeasible; the
    # only workable refutation row is u-w+eps<=0, forcing u<=0.749
    esip = _toy_esip()
    scen = ScenarioSet().add(Scenario(np.array([0.75]), 1, 0.25))
    d, assignment, out = master_step(esip, scen, _opts())
    assert d is not None
    assert assignment[0].kind == "refute"
    assert assignment[0].h_row == 1
    assert d.u[0] <= 0.75 - esip.epsilon + 1e-6
    assert d.gamma == pytest.approx(-1.0, abs=1e-6)


def test_master_warm_assignment_length_checked():
    esip = _toy_esip()
    scen = ScenarioSet().add(Scenario(np.array([0.3]), 1, 0.1))
    with pytest.raises(ContractViolationError):
        master_step(esip, scen, _opts(), warm=(SATISFY, SATISFY))


def _ridge_esip():
    # cost ignores u1 entirely, so the master optimum is a flat ridge
    # {u0 = 0.3, gamma = 0, u1 free}
    prob = GsipProblem(
        n_u=2, n_w=1, n_g=0, n_h=1,
        u_lower=-np.ones(2), u_upper=np.ones(2),
        w_lower=np.zeros(1), w_upper=np.ones(1),
        gamma_lower=0.0, gamma_upper=10.0,
        forward_state=lambda u, w: np.empty(0),
        cost=lambda x, u, w: (float(u[0]) - 0.3) ** 2,
        constraints=lambda x, u, w: np.empty(0),
        admissibility=lambda x, u, w: np.array([1.0]),
    )
    return build_esip(prob, epsilon=1e-3)


def test_master_reg_collapses_flat_ridge_to_min_norm_plan():
    # oracle: minimize gamma + mu*(u0^2 + u1^2) with gamma = (u0-0.3)^2
    # binding gives u0 = 0.3/(1+mu), u1 = 0, gamma = (0.3 mu/(1+mu))^2;
    # with mu = 1e-4 that is u0 = 0.29997, gamma ~ 9.0e-10, and the
    # solver pins the ridge coordinate to |u1| <= opt_tol/(2 mu) = 5e-4;
    # along u0 the near-zero curvature of the regularized objective
    # leaves ~2e-4 of slack at the solver's stopping resolution
    esip = _ridge_esip()
    scen = ScenarioSet().add(Scenario(np.array([0.0]), 1, 0.1))
    d, assignment, out = master_step(esip, scen, _opts(master_reg=1e-4))
    assert assignment == (SATISFY,)
    assert d.u[0] == pytest.approx(0.3, abs=5e-4)
    assert abs(d.u[1]) <= 1e-3
    assert 0.0 <= d.gamma <= 1e-6
    # the tie-break does not move the reported bound materially
    d0, _, _ = master_step(esip, scen, _opts())
    assert abs(d0.gamma - d.gamma) <= 1e-6


def test_master_reg_must_be_nonnegative():
    with pytest.raises(ContractViolationError):
        ReductionOptions(master_reg=-1e-6)


def test_disjunct_choice_validation():
    with pytest.raises(ContractViolationError):
        DisjunctChoice("maybe")
    with pytest.raises(ContractViolationError):
        DisjunctChoice("satisfy", h_row=2)


# ---------------------------------------------------------------------------
# end-to-end exchange loop
# ---------------------------------------------------------------------------


def test_t1_solve_reaches_grid_optimum():
    # grid oracle over 201 u-points: the largest robustly feasible decision
    # is u*=0.5 with objective -0.5
    esip = _toy_esip()
    report = solve_esip(esip, _opts())
    assert report.status == STATUS_CONVERGED
    assert report.decision.u[0] == pytest.approx(0.5, abs=5e-4)
    assert report.decision.gamma == pytest.approx(-0.5, abs=5e-4)
    assert report.sigma_history[-1] <= 1e-6
    assert len(report.scenarios) <= 20
    assert report.iterations == len(report.sigma_history)


def test_t1_gamma_history_is_monotone():
    report = solve_esip(_toy_esip(), _opts())
    g = np.array(report.gamma_history)
    assert np.all(np.diff(g) >= -1e-6)


def test_solve_is_deterministic():
    a = solve_esip(_toy_esip(), _opts())
    b = solve_esip(_toy_esip(), _opts())
    assert a.gamma_history == b.gamma_history
    assert a.sigma_history == b.sigma_history
    assert a.decision.u[0] == b.decision.u[0]


def test_trivial_convergence_with_no_scenarios():
    # constant zero cost and g=-1: the first master decision is already
    # robustly feasible, so the loop stops with an empty scenario set
    prob = GsipProblem(
        n_u=1, n_w=1, n_g=1, n_h=1,
        u_lower=np.zeros(1), u_upper=np.ones(1),
        w_lower=np.zeros(1), w_upper=np.ones(1),
        gamma_lower=0.0, gamma_upper=10.0,
        forward_state=lambda u, w: np.empty(0),
        cost=lambda x, u, w: 0.0,
        constraints=lambda x, u, w: np.array([-1.0]),
        admissibility=lambda x, u, w: np.array([w[0]]),
    )
    report = solve_esip(build_esip(prob, epsilon=1e-3), _opts())
    assert report.status == STATUS_CONVERGED
    assert report.iterations == 1
    assert len(report.scenarios) == 0
    assert report.decision.gamma == pytest.approx(0.0, abs=1e-8)


def test_empty_admissible_set_converges_vacuously():
    prob = GsipProblem(
        n_u=1, n_w=1, n_g=1, n_h=1,
        u_lower=np.zeros(1), u_upper=np.ones(1),
        w_lower=np.zeros(1), w_upper=np.ones(1),
        gamma_lower=-1.0, gamma_upper=0.0,
        forward_state=lambda u, w: np.empty(0),
        cost=lambda x, u, w: -float(u[0]),
        constraints=lambda x, u, w: np.array([w[0] + 2.0]),  # never satisfiable
        admissibility=lambda x, u, w: np.array([-1.0 - w[0]]),  # never admissible
    )
    report = solve_esip(build_esip(prob, epsilon=1e-3), _opts())
    assert report.status == STATUS_CONVERGED
    assert report.iterations == 1
    assert report.sigma_history[0] == -math.inf


def test_viol_tol_must_stay_below_epsilon():
    with pytest.raises(ContractViolationError):
        solve_esip(_toy_esip(epsilon=1e-7), _opts())


def test_duplicate_scenario_aborts_with_diagnostic(monkeypatch):
    esip = _toy_esip()
    stuck = SeparationResult(Scenario(np.array([0.4]), 1, 0.1), 0.1, 0)

    monkeypatch.setattr(reduction, "separation_step",
                        lambda *a, **kw: stuck)
    with pytest.raises(SeparationStagnationError):
        reduction.solve_esip(esip, _opts())


def test_iteration_limit_status(monkeypatch):
    esip = _toy_esip()
    calls = {"n": 0}

    def drifting(esip_, d, opts, iteration=0, warm_ws=()):
        calls["n"] += 1
        w = np.array([0.9 - 0.01 * calls["n"]])
        return SeparationResult(Scenario(w, iteration, 0.2), 0.2, 1)

    monkeypatch.setattr(reduction, "separation_step", drifting)
    report = reduction.solve_esip(esip, _opts(max_outer_iters=3))
    assert report.status == STATUS_ITERATION_LIMIT
    assert report.iterations == 3


# ---------------------------------------------------------------------------
# classical fixed-set loop
# ---------------------------------------------------------------------------


def _fixed_set_problem(constraints):
    # disturbance set [0, 0.8] described without looking at the decision
    return GsipProblem(
        n_u=1, n_w=1, n_g=1, n_h=2,
        u_lower=np.zeros(1), u_upper=np.ones(1),
        w_lower=np.zeros(1), w_upper=np.ones(1),
        gamma_lower=-1.0, gamma_upper=0.0,
        forward_state=lambda u, w: np.empty(0),
        cost=lambda x, u, w: -float(u[0]),
        constraints=constraints,
        admissibility=lambda x, u, w: np.array([w[0], 0.8 - w[0]]),
    )


def test_standard_sip_converges_on_fixed_set():
    prob = _fixed_set_problem(lambda x, u, w: np.array([w[0] - 2.0]))
    report = solve_standard_sip(prob, _opts())
    assert report.status == STATUS_CONVERGED
    assert report.decision.u[0] == pytest.approx(1.0, abs=1e-5)
    assert report.decision.gamma == pytest.approx(-1.0, abs=1e-5)


def test_standard_sip_detects_infeasible_master():
    # g(w)=w-0.5 must hold on all of [0,0.8]; impossible for any decision
    prob = _fixed_set_problem(lambda x, u, w: np.array([w[0] - 0.5]))
    report = solve_standard_sip(prob, _opts())
    assert report.status == STATUS_MASTER_INFEASIBLE
    assert report.decision is not None  # last relaxed decision is reported


def test_standard_sip_rejects_decision_coupled_set():
    with pytest.raises(ContractViolationError):
        solve_standard_sip(build_toy_problem(), _opts())


# ---------------------------------------------------------------------------
# extreme-point candidate survey
# ---------------------------------------------------------------------------


def _square_problem():
    # 2-dim disturbance box [0,1]^2; J(u,w) = u + w1 + 2*w2 so the
    # epigraph row is affine with its maximum at the corner (1,1);
    # admissibility h = 1.5 - w1 - w2 cuts that corner off
    return GsipProblem(
        n_u=1,
        n_w=2,
        n_g=0,
        n_h=1,
        u_lower=np.zeros(1),
        u_upper=np.ones(1),
        w_lower=np.zeros(2),
        w_upper=np.ones(2),
        gamma_lower=-10.0,
        gamma_upper=10.0,
        forward_state=lambda u, w: w,
        cost=lambda x, u, w: float(u[0] + w[0] + 2.0 * w[1]),
        constraints=lambda x, u, w: np.empty(0),
        admissibility=lambda x, u, w: np.array([1.5 - w[0] - w[1]]),
    )


def test_candidate_set_enumerates_box_corners():
    prob = _square_problem()
    d = DecisionPoint(np.zeros(1), 0.0)
    corners = reduction._candidate_set(prob, d)
    got = sorted(tuple(c) for c in corners)
    assert got == [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)]


def test_candidate_set_prefers_problem_generator():
    prob = _square_problem()
    supplied = np.array([[0.25, 0.75], [0.5, 0.5]])
    prob = dataclasses.replace(prob, candidate_disturbances=lambda u, g: supplied)
    got = reduction._candidate_set(prob, DecisionPoint(np.zeros(1), 0.0))
    assert len(got) == 2
    np.testing.assert_allclose(got[0], [0.25, 0.75])


def test_candidate_survey_values_standard_path():
    # hand oracle at gamma=0, u=0: epigraph row = w1 + 2*w2, admissible
    # iff w1 + w2 <= 1.5; corner (1,1) is inadmissible -> sigma -inf
    prob = _square_problem()
    d = DecisionPoint(np.zeros(1), 0.0)
    survey = reduction._survey_candidates(
        prob, None, d, reduction._candidate_set(prob, d)
    )
    by_corner = {tuple(w): s for w, s in zip(survey.ws, survey.sigmas)}
    assert by_corner[(0.0, 0.0)] == pytest.approx(0.0)
    assert by_corner[(1.0, 0.0)] == pytest.approx(1.0)
    assert by_corner[(0.0, 1.0)] == pytest.approx(2.0)
    assert by_corner[(1.0, 1.0)] == -math.inf
    assert survey.any_admissible
    # row maxima ignore admissibility: the ranking sweep wants raw values
    assert survey.row_max[0] == pytest.approx(3.0)
    cut = reduction._best_candidate_cut(survey, viol_tol=1e-6)
    assert cut is not None
    idx, sigma, strength = cut
    assert tuple(survey.ws[idx]) == (0.0, 1.0)
    assert sigma == pytest.approx(2.0)
    assert strength == pytest.approx(2.0)


def test_candidate_survey_values_esip_path():
    # capped aggregation: sigma = min(h + eps, row); at (0,1) h = 0.5 so
    # sigma = row = ... no: min(0.5 + 1e-3, 2.0) = 0.501; at (1,1)
    # h = -0.5 so sigma = -0.499; strength still ranks (1,1) highest
    prob = _square_problem()
    esip = build_esip(prob, epsilon=1e-3)
    d = DecisionPoint(np.zeros(1), 0.0)
    survey = reduction._survey_candidates(
        prob, esip, d, reduction._candidate_set(prob, d)
    )
    by_corner = {tuple(w): (s, v) for w, s, v in
                 zip(survey.ws, survey.sigmas, survey.strengths)}
    assert by_corner[(0.0, 1.0)][0] == pytest.approx(0.501)
    assert by_corner[(1.0, 1.0)][0] == pytest.approx(-0.499)
    assert by_corner[(1.0, 1.0)][1] == pytest.approx(3.0)
    cut = reduction._best_candidate_cut(survey, viol_tol=1e-6)
    # the inadmissible corner does not count as a cut; (0,1) wins on
    # strength among violating candidates
    idx, sigma, strength = cut
    assert tuple(survey.ws[idx]) == (0.0, 1.0)
    assert strength == pytest.approx(2.0)


def test_standard_separation_uses_corner_candidates():
    # worst admissible point of w1 + 2*w2 over the clipped box
    # {w in [0,1]^2, w1 + w2 <= 1.5} is the polytope vertex (0.5, 1.0)
    # with value 2.5: corners seed the search at (0,1) = 2.0 and the
    # smooth program must then climb the admissibility facet to 2.5
    prob = _square_problem()
    opts = _opts()
    report = solve_standard_sip(prob, opts)
    # master: minimize gamma s.t. gamma >= u + w1 + 2*w2 at scenarios,
    # u free in [0,1] -> u*=0, gamma* = 2.5
    assert report.status == STATUS_CONVERGED
    assert report.decision.gamma == pytest.approx(2.5, abs=1e-4)
