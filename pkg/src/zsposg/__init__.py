"""Point-based value iteration for two-player zero-sum POSGs, with a CFR+ baseline."""
from .cfr import (
    best_response_value,
    build_extensive_form,
    cfr_plus_solve,
    exact_value_oracle,
    exploitability,
    security_value,
    sequence_form_value,
)
from .dpomdp import load_benchmark, load_dpomdp, parse_dpomdp, serialize_dpomdp
from .game import Role, ZsPosg, competitive_adaptation, embed_matrix_game, random_game, validate
from .lp import LinearProgram, solve_lp, solve_matrix_game
from .occupancy import (
    DecisionRule,
    JointDecisionRule,
    OccupancyState,
    condition,
    evaluate_joint_policy,
    expected_reward,
    initial_occupancy,
    marginalize,
    recompose,
    transition,
)
from .operators import backup_collection, greedy_lp, point_backup
from .pbvi import PBVISolver, SolveResult, SolverConfig, extract_policy, solve
from .value import eval_collection, eval_family

__all__ = [
    "DecisionRule",
    "JointDecisionRule",
    "LinearProgram",
    "OccupancyState",
    "PBVISolver",
    "Role",
    "SolveResult",
    "SolverConfig",
    "ZsPosg",
    "backup_collection",
    "best_response_value",
    "build_extensive_form",
    "cfr_plus_solve",
    "competitive_adaptation",
    "condition",
    "embed_matrix_game",
    "eval_collection",
    "eval_family",
    "evaluate_joint_policy",
    "exact_value_oracle",
    "expected_reward",
    "exploitability",
    "extract_policy",
    "greedy_lp",
    "initial_occupancy",
    "load_benchmark",
    "load_dpomdp",
    "marginalize",
    "parse_dpomdp",
    "point_backup",
    "random_game",
    "recompose",
    "security_value",
    "sequence_form_value",
    "serialize_dpomdp",
    "solve",
    "solve_lp",
    "solve_matrix_game",
    "transition",
    "validate",
]
