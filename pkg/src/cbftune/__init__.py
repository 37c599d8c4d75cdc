"""Feasibility-guided gradient tuning of CBF-CLF quadratic-program controllers.

The package closes the loop between four layers:

* :mod:`cbftune.qp` -- dense active-set solving of the per-step control QP,
* :mod:`cbftune.qp_diff` -- implicit differentiation of QP solutions,
* :mod:`cbftune.plants` -- plant models and assembly of barrier/CLF rows,
* :mod:`cbftune.rollout` / :mod:`cbftune.updates` -- closed-loop rollouts with
  forward sensitivities and the two parameter-update rules (reward ascent on
  feasible horizons, feasibility extension on infeasible ones).

:mod:`cbftune.experiments` and :mod:`cbftune.cli` wrap these in reproducible
studies with CSV outputs.
"""

from .qp import (
    QpProblem,
    QpSolution,
    QpStatus,
    RelaxationReport,
    NumericalFailureError,
    solve,
    min_relaxation,
)
from .qp_diff import (
    DegeneracyFlag,
    SolutionJacobian,
    SingularKktError,
    DataGradients,
    solution_jacobian,
    chain_to_inputs,
)
from .plants import (
    ParamVector,
    PlantModel,
    CarModel,
    UnicycleModel,
    StructuralGradients,
    build_qp,
    car_model,
    unicycle_model,
    leader_trajectory,
)
from .rollout import (
    RolloutTrace,
    GradientBundle,
    rollout,
    objective_value,
    grad_objective,
    grad_margins,
    write_trace_csv,
)
from .updates import (
    RfggdConfig,
    DirectionResult,
    Case1Result,
    Case2Result,
    OnlineResult,
    feasible_direction,
    update_feasible,
    update_infeasible,
    online_adapt,
)
from .experiments import (
    GridSpec,
    GridResult,
    InitStudy,
    FollowerReport,
    car_grid,
    car_rfggd_study,
    follower_study,
)

__all__ = [name for name in dir() if not name.startswith("_")]
