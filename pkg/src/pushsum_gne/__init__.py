"""Distributed learning of generalized Nash equilibria in online stochastic aggregative games.

Players over a directed, time-varying network run a push-sum primal-dual
iteration: each keeps a decision, a push-sum weight, a local multiplier for
the coupled constraint and a tracker of the aggregate.  The package provides
the communication graphs (:mod:`.graph`), game definitions (:mod:`.game`),
the iteration (:mod:`.engine`), centralized reference solvers
(:mod:`.solvers`), evaluation metrics (:mod:`.metrics`) and a command-line
experiment runner (:mod:`.cli`).
"""

from ._core import BACKEND
from .engine import (
    DivergedRunError,
    ExplicitSchedule,
    MonitorViolation,
    PreconditionError,
    RunState,
    StepsizeSchedule,
    init,
    run,
    step,
    validate_regime,
)
from .game import (
    Ball,
    Box,
    CallableGame,
    CustomSet,
    DeclaredConstants,
    GameModel,
    NoiseModel,
    ScalarQuadraticGame,
    make_electricity_market,
    make_quadratic_toy,
)
from .graph import GraphSchedule, build_weights, complete_graph, paper_fig1, validate_schedule
from .metrics import MetricsLog, consensus_errors, rate_fit, regret, regret_report, residuals, violation
from .solvers import ComparatorSolution, SolverError, VgneSolution, solve_comparator, solve_vgne

__version__ = "0.1.0"
