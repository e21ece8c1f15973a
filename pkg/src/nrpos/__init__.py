"""Simulation of NR positioning: carrier phase, timing, angle, hopping, aggregation and sidelink."""

from .scenario import (
    AntennaPanel,
    Node,
    NodeKind,
    Position3D,
    Scenario,
    ScenarioError,
    ScenarioParseError,
    build_scenario,
    derive_rng,
    load_scenario,
)
from .solvers import PositionEstimate, SingularGeometryError, UnderdeterminedError, solve_aoa, solve_rtt, solve_tdoa
from .harness import ExperimentConfig, run_experiment, summarize

__all__ = [
    "AntennaPanel",
    "ExperimentConfig",
    "Node",
    "NodeKind",
    "Position3D",
    "PositionEstimate",
    "Scenario",
    "ScenarioError",
    "ScenarioParseError",
    "SingularGeometryError",
    "UnderdeterminedError",
    "build_scenario",
    "derive_rng",
    "load_scenario",
    "run_experiment",
    "solve_aoa",
    "solve_rtt",
    "solve_tdoa",
    "summarize",
]
