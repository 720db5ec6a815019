"""Drone routing for post-disaster road damage assessment."""
from .netcore import (
    Link,
    NetworkError,
    RoadNetwork,
    TransformedNetwork,
    artificial_node_coords,
    distance,
    normalize_coords,
    transform_network,
)
from .instgen import GenSpec, ProblemInstance, augment_8fold, generate_instance, make_instance
from .env import EnvState, evaluate_route_set, feasible_actions, is_terminal, reset, step
from .baselines import Solution, emit_lp, gap, solve_exact_dfs, solve_exact_norevisit, solve_greedy
from .search import BACKEND as SEARCH_BACKEND

__version__ = "0.1.0"
