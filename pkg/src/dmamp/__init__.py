"""Memory AMP for row-partitioned linear inverse problems, centralized and distributed."""
from .consensus import NetworkGraph, caterpillar, global_average, global_sum, make_graph, star_graph
from .harness import ExperimentConfig, oamp_fixed_point_oracle, run_experiment
from .mamp import run_centralized, run_variational
from .model import LinearSystem, SignalPrior, load_instance, make_system, partition, save_instance
from .runtime import CommsLedger, distributed_lambda, run_dmamp, run_fdmamp
from .spectral import SpectralStats, stats_from_eigenvalues, stats_from_moments

__all__ = [
    "NetworkGraph", "caterpillar", "global_average", "global_sum", "make_graph", "star_graph",
    "ExperimentConfig", "oamp_fixed_point_oracle", "run_experiment",
    "run_centralized", "run_variational",
    "LinearSystem", "SignalPrior", "load_instance", "make_system", "partition", "save_instance",
    "CommsLedger", "distributed_lambda", "run_dmamp", "run_fdmamp",
    "SpectralStats", "stats_from_eigenvalues", "stats_from_moments",
]
