"""Parallel and subsampled greedy approximation of Euclidean max-cut."""

from .core import Dataset, InputError, RefusalError, brute_force_opt, cut_value, distance, distance_summary, objective_f
from .randoracle import RandomOracle

__all__ = [
    "Dataset", "InputError", "RefusalError", "RandomOracle", "brute_force_opt", "cut_value",
    "distance", "distance_summary", "objective_f",
]
__version__ = "0.1.0"
