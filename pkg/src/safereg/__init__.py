"""Safe-region learning for controlled systems with a known causal graph.

The package combines a causal prior estimated from passive monitoring data
with Gaussian-process learning and a cost-aware safe intervention policy.
"""

from safereg.graph import CausalGraph, InterventionTarget, VariableKind, build_graph
from safereg.speclogic import Predicate, SpecFormula, Trajectory, evaluate, parse_spec
from safereg.observational import (
    EffectModel,
    ObservationDataset,
    adjust_effect,
    estimate_prior,
    hsic_test,
    load_csv,
    validate_graph,
)
from safereg.gp import ConfidenceParams, GaussianProcess, PriorScaledKernel
from safereg.learner import ColConfig, ColTrace, CostModel, SafeRegionEstimate, run_col
from safereg.env import ExampleSystem

__version__ = "0.1.0"

__all__ = [
    "CausalGraph",
    "ColConfig",
    "ColTrace",
    "ConfidenceParams",
    "CostModel",
    "EffectModel",
    "ExampleSystem",
    "GaussianProcess",
    "InterventionTarget",
    "ObservationDataset",
    "Predicate",
    "PriorScaledKernel",
    "SafeRegionEstimate",
    "SpecFormula",
    "Trajectory",
    "VariableKind",
    "adjust_effect",
    "build_graph",
    "estimate_prior",
    "evaluate",
    "hsic_test",
    "load_csv",
    "parse_spec",
    "run_col",
    "validate_graph",
]
