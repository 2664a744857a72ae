import dataclasses

import numpy as np
import pytest

from safereg.env import ExampleSystem
from safereg.errors import ConfigError, MissingTruthFlags, NotIdentifiable, SpecError
from safereg.gp import ConfidenceParams, GaussianProcess, PriorScaledKernel
from safereg.graph import CausalGraph, build_graph
from safereg.learner import (
    ColConfig,
    ColTrace,
    CostModel,
    IterationRecord,
    SafeRegionEstimate,
    estimate_region,
    fallback_intervention,
    run_col,
    select_intervention,
    unsafe_interventions_to_converge,
)
from safereg.speclogic import parse_spec

SPEC = parse_spec("always[H=1](Y < 50)")
PRACTICAL = ConfidenceParams(beta_sqrt=2.0)


def constant(value):
    return lambda p: np.full(len(np.atleast_2d(p)), float(value))


def flat_gp(mean, sd, dims=2, observations=()):
    kernel = PriorScaledKernel(constant(sd), [0] * dims, [1] * dims)
    return GaussianProcess(constant(mean), kernel, observations)


def grid2(n=5):
    a = np.linspace(0, 1, n)
    return np.array(np.meshgrid(a, a, indexing="ij")).reshape(2, -1).T


def region_of(variance, member, mean=None, delta=0.8):
    variance = np.asarray(variance, dtype=float)
    mean = np.full(len(variance), 0.9) if mean is None else np.asarray(mean, dtype=float)
    grid = np.arange(len(variance), dtype=float)[:, None]
    return SafeRegionEstimate(grid, mean, variance, 2 * np.sqrt(variance), np.asarray(member), 4.0, delta)


@pytest.fixture(scope="module")
def edge_server():
    from pathlib import Path
    return CausalGraph.load(Path(__file__).resolve().parents[1] / "fixtures" / "edge_server.json")


# --- region estimate ----------------------------------------------------------------

def test_confident_prior_is_all_member():
    region = estimate_region(flat_gp(0.95, 0.0), PRACTICAL, 0.8, grid2(), t=1)
    assert region.member.all()
    assert region.measure == 1.0


def test_coin_flip_prior_is_empty():
    region = estimate_region(flat_gp(0.5, 0.0), PRACTICAL, 0.8, grid2(), t=1)
    assert region.measure == 0.0


def test_step_function_region_is_conservative():
    x = np.linspace(0, 1, 21)
    gp = flat_gp(0.5, 0.5, dims=1, observations=[((u,), float(u < 0.5), 0.0) for u in x])
    grid = np.linspace(0, 1, 101)[:, None]
    region = estimate_region(gp, PRACTICAL, 0.8, grid, t=1)
    assert region.member.any()
    assert np.all(grid[region.member, 0] < 0.5)
    assert region.measure < 0.5


def test_membership_uses_clamped_mean():
    gp = flat_gp(0.5, 0.1, observations=[((0.5, 0.5), 5.0, 0.01)])
    region = estimate_region(gp, PRACTICAL, 0.8, grid2(), t=1)
    assert region.mean.max() <= 1.0
    np.testing.assert_array_equal(region.member, region.mean - region.kappa >= 0.8)


def test_theoretical_mode_is_wider():
    gp = flat_gp(0.9, 0.05)
    practical = estimate_region(gp, PRACTICAL, 0.8, grid2(), t=3)
    theory = estimate_region(gp, ConfidenceParams(alpha=0.8, mode="theoretical", noise_bound=0.05), 0.8,
                             grid2(), t=3)
    assert theory.beta > practical.beta
    assert theory.measure <= practical.measure


def test_empty_grid():
    with pytest.raises(ValueError):
        estimate_region(flat_gp(0.5, 0.1), PRACTICAL, 0.8, np.zeros((0, 2)), t=1)


# --- selection ---------------------------------------------------------------------

def test_select_highest_std():
    region = region_of([0.09, 0.04], [True, True])
    assert select_intervention(region, np.array([1.0, 1.0])) == 0


def test_select_per_unit_cost():
    region = region_of([0.09, 0.04], [True, True])
    assert select_intervention(region, np.array([3.0, 1.0])) == 1
    assert select_intervention(region, np.array([3.0, 1.0]), use_cost_scaling=False) == 0


def test_select_empty_region():
    region = region_of([0.09, 0.04], [False, False])
    assert select_intervention(region, np.ones(2)) is None
    assert select_intervention(region, np.ones(2), use_safety_constraint=False) == 0


def test_select_only_members():
    region = region_of([0.09, 0.04, 0.01], [False, True, True])
    assert select_intervention(region, np.ones(3)) == 1


def test_select_tie_goes_to_first_grid_point():
    region = region_of([0.04, 0.04, 0.04], [False, True, True])
    assert select_intervention(region, np.ones(3)) == 1


@pytest.mark.parametrize("scale", [0.01, 1.0, 7.5, 1e4])
def test_select_invariant_to_cost_scale(scale):
    rng = np.random.default_rng(0)
    region = region_of(rng.random(30), rng.random(30) < 0.5)
    costs = rng.uniform(0.5, 4.5, 30)
    assert select_intervention(region, costs * scale) == select_intervention(region, costs)
    uniform = np.ones(30)
    assert select_intervention(region, uniform * scale) == select_intervention(region, uniform)


def test_fallback_probability_rule():
    # P(f >= 0.8): point 0 is 0.5 sd below, point 1 is 1 sd below
    region = region_of([0.04, 0.01], [False, False], mean=[0.7, 0.7])
    assert fallback_intervention(region, rule="prob") == 0
    # the lower bound prefers the tighter point instead
    assert fallback_intervention(region, rule="lcb") == 1


def test_fallback_ties_prefer_information_per_cost():
    region = region_of([0.0, 0.0, 0.0], [False] * 3, mean=[0.2, 0.2, 0.2])
    assert fallback_intervention(region, np.ones(3)) == 0
    region = region_of([0.04, 0.09, 0.09], [False] * 3, mean=[0.8, 0.8, 0.8])
    assert fallback_intervention(region, np.array([1.0, 2.0, 1.0])) == 2


def test_fallback_unknown_rule():
    with pytest.raises(ValueError):
        fallback_intervention(region_of([0.1], [False]), rule="max")


# --- budget -------------------------------------------------------------------------

def test_cost_model():
    model = CostModel(lambda p: 2.0, budget=5.0)
    assert model.affordable(5.0)
    model.charge(2.0)
    model.charge(2.0)
    assert not model.affordable(2.0)
    with pytest.raises(ValueError):
        model.charge(2.0)
    assert model.spent == 4.0
    with pytest.raises(ValueError):
        CostModel(lambda p: 0.0, 1.0)((0.5, 0.5))


def test_zero_budget_keeps_prior_region(edge_server):
    cfg = ColConfig(budget=0.0, resolution=10, bootstrap_reps=5)
    trace = run_col(cfg, ExampleSystem(1, 0), edge_server, SPEC)
    assert trace.records == []
    assert trace.final_measure == trace.initial_measure
    model = trace.effect_model
    assert trace.initial_measure == pytest.approx(model.initial_region(0.8).mean())


def test_budget_never_exceeded(edge_server):
    for seed in range(3):
        cfg = ColConfig(budget=9.0, resolution=12, bootstrap_reps=5, seed=seed)
        trace = run_col(cfg, ExampleSystem(1, seed), edge_server, SPEC)
        assert trace.spent <= 9.0
        spent = [r.spent for r in trace.records]
        assert spent == sorted(spent)
        assert [r.index for r in trace.records] == list(range(1, len(trace.records) + 1))


# --- convergence count ---------------------------------------------------------------

def make_trace(measures, safe, initial=0.0):
    records = [IterationRecord(i + 1, 10 + 2 * i, (0.5, 0.5), 1.0, float(i + 1), 1, s, m, "", False)
               for i, (m, s) in enumerate(zip(measures, safe))]
    return ColTrace(("C", "M"), {}, initial, "", records)


def test_all_safe_counts_zero():
    conv = unsafe_interventions_to_converge(make_trace([0.2, 0.3, 0.3, 0.3, 0.3], [True] * 5))
    assert conv.count == 0
    assert conv.converged


def test_never_flattening_is_not_converged():
    lam = [0.1 * (i + 1) for i in range(8)]
    conv = unsafe_interventions_to_converge(make_trace(lam, [False, True] * 4))
    assert not conv.converged
    assert conv.count == 4


def test_plateau_counts_unsafe_before_it():
    lam = [0.1, 0.3, 0.4, 0.4, 0.4, 0.4, 0.4]
    safe = [False, False, True, False, True, True, False]
    conv = unsafe_interventions_to_converge(make_trace(lam, safe))
    assert conv.converged
    assert conv.step == 3
    assert conv.count == 2


def test_empty_plateau_is_not_convergence():
    lam = [0.0, 0.0, 0.0, 0.0, 0.2, 0.2, 0.2, 0.2]
    conv = unsafe_interventions_to_converge(make_trace(lam, [False] * 8))
    assert conv.step == 5


def test_missing_truth_flags():
    with pytest.raises(MissingTruthFlags):
        unsafe_interventions_to_converge(make_trace([0.1], [None]))


# --- config and loop ---------------------------------------------------------------

@pytest.mark.parametrize("field,value", [
    ("delta", 1.5), ("delta", 0.0), ("alpha", 1.0), ("resolution", 1), ("budget", -1.0), ("window", -2),
    ("mode", "loose"), ("fallback", "random"), ("sigma_max", 0.0),
])
def test_config_errors_name_the_field(field, value):
    with pytest.raises(ConfigError) as info:
        ColConfig(**{field: value})
    assert str(info.value).startswith(field)


def test_config_dict_roundtrip():
    cfg = ColConfig(controls=["C", "M"], window=15)
    again = ColConfig(**cfg.to_dict())
    assert again == dataclasses.replace(cfg)


def test_run_is_deterministic(edge_server):
    cfg = ColConfig(resolution=15, bootstrap_reps=5, seed=3)
    a = run_col(cfg, ExampleSystem(1, 3), edge_server, SPEC)
    b = run_col(cfg, ExampleSystem(1, 3), edge_server, SPEC)
    assert a.csv_text({"seed": 3}) == b.csv_text({"seed": 3})
    assert a.summary() == b.summary()


def test_trace_export(edge_server, tmp_path):
    cfg = ColConfig(resolution=10, bootstrap_reps=5)
    trace = run_col(cfg, ExampleSystem(1, 0), edge_server, SPEC)
    path = tmp_path / "trace.csv"
    trace.to_csv(path, {"config_hash": trace.config_hash, "seed": 0})
    lines = path.read_text().splitlines()
    assert lines[0] == f"# config_hash={trace.config_hash}"
    assert lines[2].startswith("t_k,C,M,cost,spec_outcome,truth_safe,lambda")
    assert len(lines) == 3 + len(trace.records)
    summary = trace.summary()
    assert {"lambda_final", "unsafe_count", "converged", "convergence_step", "spent"} <= set(summary)
    assert len(trace.regions) == len(trace.records) + 1
    assert len(trace.region_rows()) == 100


def test_no_prior_ablation_starts_empty(edge_server):
    cfg = ColConfig(resolution=10, use_causal_prior=False)
    trace = run_col(cfg, ExampleSystem(1, 0), edge_server, SPEC)
    assert trace.initial_measure == 0.0
    assert not trace.effect_model.support.any()
    assert trace.records[0].fallback


def test_window_limits_gp_memory(edge_server):
    cfg = ColConfig(resolution=10, bootstrap_reps=5, window=3, budget=15.0)
    trace = run_col(cfg, ExampleSystem(2, 0), edge_server, SPEC)
    assert len(trace.records) > 3
    assert len(trace.gp) == 3


def test_not_identifiable_aborts_before_interventions(fixtures_dir):
    graph = CausalGraph.load(fixtures_dir / "hidden_confounder.json")

    class Probe:
        controls = ("C",)
        domains = {"C": (0.0, 1.0)}
        clock = 0
        interventions = 0

        def observe(self):
            self.clock += 1
            return {"t": self.clock, "C": 0.5, "Y": 0.0}

        def intervene(self, point, horizon):
            self.interventions += 1
            return []

        def ground_truth_safe(self, *args, **kwargs):
            return None

        def cost(self, point):
            return 1.0

    env = Probe()
    with pytest.raises(NotIdentifiable):
        run_col(ColConfig(), env, graph, parse_spec("always[H=0](Y < 1)"))
    assert env.interventions == 0


def test_non_control_rejected(edge_server):
    with pytest.raises(ConfigError):
        run_col(ColConfig(controls=("W",)), ExampleSystem(1, 0), edge_server, SPEC)


def test_graph_without_spec_metric(edge_server):
    g = build_graph([("C", "control"), ("Y", "target")], [("C", "Y")])
    with pytest.raises(SpecError):
        run_col(ColConfig(controls=("C",)), ExampleSystem(1, 0), g, parse_spec("always[H=1](Z < 1)"))
