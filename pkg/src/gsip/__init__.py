"""Solver library for generalized semi-infinite programs (GSIPs).

Decision-dependent uncertainty sets are handled through an
existence-constrained reformulation: each disturbance must either be refuted
(shown inadmissible with margin epsilon) or satisfy every robust constraint.
A local-reduction exchange loop alternates a finite-scenario master problem
with a separation search for the worst admissible disturbance.  A planar
quadrotor robust optimal control benchmark is included, together with a CLI
(``gsip``) that writes machine-readable reports, CSV trajectories, and
diagnostic figures.
"""

from .core import (
    ContractViolationError,
    NumericalFailureError,
    NEGATION_LOGICAL_MIN,
    NEGATION_PAPER_MAX,
    DecisionPoint,
    EsipProblem,
    GsipProblem,
    Scenario,
    ScenarioSet,
    SimplexWeight,
    admissibility_values,
    build_esip,
    combined_constraints,
    lambda_smoothed_value,
    negation_margin,
    violation,
)
from .nlp import (
    SmoothProgram,
    SolverOptions,
    SolverOutcome,
    feasibility_phase,
    finite_diff_gradient,
    minimize,
    multistart_minimize,
)
from .reduction import (
    DisjunctChoice,
    ReductionOptions,
    SeparationResult,
    SolveReport,
    master_step,
    separation_step,
    solve_esip,
    solve_standard_sip,
)
from .quadrotor import (
    McReport,
    QuadParams,
    ThrustPlan,
    VARIANTS,
    build_variant,
    monte_carlo,
    simulate,
)
from .toy import TOY_OPTIMAL_U, build_toy_problem

__version__ = "0.1.0"
