"""STREL monitoring with counting robustness, control synthesis and LSTM imitation."""
from .formula import FormulaSyntaxError, expand_surround, horizon, parse
from .semantics import (HorizonError, Monitor, RobustnessReport, SemanticsConfig,
                        qualitative_sat, robustness_counting, robustness_original,
                        robustness_team)
from .spatial import (ConnectionGraph, ConnectivityPolicy, Scenario, TeamTrace,
                      connection_graph, enumerate_routes, rollout, voronoi_neighbors)
from .synthesis import (PsoConfig, RefineConfig, SynthesisProblem, SynthesisResult,
                        objective, synthesize)

__all__ = [
    "FormulaSyntaxError", "expand_surround", "horizon", "parse",
    "HorizonError", "Monitor", "RobustnessReport", "SemanticsConfig", "qualitative_sat",
    "robustness_counting", "robustness_original", "robustness_team",
    "ConnectionGraph", "ConnectivityPolicy", "Scenario", "TeamTrace", "connection_graph",
    "enumerate_routes", "rollout", "voronoi_neighbors",
    "PsoConfig", "RefineConfig", "SynthesisProblem", "SynthesisResult", "objective",
    "synthesize",
]
