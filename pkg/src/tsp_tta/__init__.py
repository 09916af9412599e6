"""Distance-matrix transformer policy for the Euclidean TSP with
permutation-based test-time augmentation, REINFORCE training, and exact
small-instance oracles."""

from .decoding import BeamConfig, DecodedTour, decode_beam, decode_greedy, decode_sample
from .metrics import EvalReport, average_tour_length, optimality_gap
from .model import ModelConfig, init_params
from .oracles import (
    SolveResult,
    improve_2opt,
    solve_brute_force,
    solve_held_karp,
    solve_nearest_neighbor,
)
from .training import TrainConfig, train
from .tsp import (
    DistanceMatrix,
    IndexPermutation,
    Tour,
    TspInstance,
    distance_matrix,
    generate_instance,
    permute_instance,
    permute_matrix,
    rotate_instance,
    tour_length,
)
from .tta import TtaConfig, TtaOutcome, gap_vs_m_sweep, tta_solve

__version__ = "0.1.0"

__all__ = [
    "BeamConfig",
    "DecodedTour",
    "DistanceMatrix",
    "EvalReport",
    "IndexPermutation",
    "ModelConfig",
    "SolveResult",
    "Tour",
    "TrainConfig",
    "TspInstance",
    "TtaConfig",
    "TtaOutcome",
    "average_tour_length",
    "decode_beam",
    "decode_greedy",
    "decode_sample",
    "distance_matrix",
    "gap_vs_m_sweep",
    "generate_instance",
    "improve_2opt",
    "init_params",
    "optimality_gap",
    "permute_instance",
    "permute_matrix",
    "rotate_instance",
    "solve_brute_force",
    "solve_held_karp",
    "solve_nearest_neighbor",
    "tour_length",
    "train",
    "tta_solve",
]
