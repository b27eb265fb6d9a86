"""Harmonic power flow for hybrid AC/DC grids with network-interfacing converters.

Typical use::

    from hybrid_hpf import build_cigre_benchmark, solve
    report = solve(build_cigre_benchmark())
"""
from hybrid_hpf.harmonic import HarmonicSet
from hybrid_hpf.results import ResultSet, read_results, result_set, write_results
from hybrid_hpf.solver import HybridModel, SolveReport, SolverConfig, run, solve
from hybrid_hpf.study import (
    StudyCase, StudyError, build_cigre_benchmark, build_model, load_study, reduced_benchmark,
)

__version__ = "0.1.0"

__all__ = [
    "HarmonicSet", "HybridModel", "ResultSet", "SolveReport", "SolverConfig", "StudyCase",
    "StudyError", "build_cigre_benchmark", "build_model", "load_study", "read_results",
    "reduced_benchmark", "result_set", "run", "solve", "write_results",
]
