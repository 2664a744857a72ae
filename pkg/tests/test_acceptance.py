"""Acceptance criteria 1-10.

Each test prints one ``criterion N: PASS|FAIL`` line with the measured values
and then asserts.  The lines are also collected into a summary section at the
end of the pytest run.  ``python tests/test_acceptance.py`` runs the same
checks without pytest.
"""

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

import conftest  # noqa: E402
from oracles import (  # noqa: E402
    brute_d_separated,
    dense_posterior,
    random_dag,
    scenario1_satisfaction_mc,
)
from safereg.cli import RunConfig, main  # noqa: E402
from safereg.env import ExampleSystem  # noqa: E402
from safereg.gp import ConfidenceParams, GaussianProcess, PriorScaledKernel, beta, information_gain  # noqa: E402
from safereg.graph import CausalGraph, build_graph  # noqa: E402
from safereg.learner import ColConfig, run_col  # noqa: E402
from safereg.observational import ObservationDataset, estimate_prior, hsic_test, make_axes  # noqa: E402
from safereg.speclogic import parse_spec  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

pytestmark = pytest.mark.acceptance


def record(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    conftest.ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def run_config(name, seeds=None, keep_regions=False):
    cfg = RunConfig.load(CONFIGS / f"{name}.json")
    graph = CausalGraph.load(cfg.graph)
    spec = parse_spec(cfg.spec)
    traces = []
    for seed in cfg.seeds if seeds is None else seeds:
        env = ExampleSystem(cfg.environment["scenario"], seed)
        traces.append(run_col(ColConfig(seed=seed, **cfg.col), env, graph, spec, keep_regions=keep_regions))
    return traces


def mean_of(traces, key):
    return float(np.mean([t.summary()[key] for t in traces]))


def test_criterion_1_scenario1_reproduction():
    start = time.perf_counter()
    traces = run_config("scenario1")
    elapsed = time.perf_counter() - start
    lam = mean_of(traces, "lambda_final")
    unsafe = mean_of(traces, "unsafe_count")
    ok = 0.35 <= lam <= 0.60 and unsafe <= 15 and elapsed < 300
    assert record(1, ok, f"lambda={lam:.3f} (want [0.35, 0.60]) unsafe={unsafe:.2f} (want <= 15) "
                         f"time={elapsed:.1f}s")


def test_criterion_2_scenario2_reproduction():
    start = time.perf_counter()
    traces = run_config("scenario2")
    elapsed = time.perf_counter() - start
    lam = mean_of(traces, "lambda_final")
    unsafe = mean_of(traces, "unsafe_count")
    ok = 0.03 <= lam <= 0.25 and unsafe <= 40 and elapsed < 600
    assert record(2, ok, f"lambda={lam:.3f} (want [0.03, 0.25]) unsafe={unsafe:.2f} (want <= 40) "
                         f"time={elapsed:.1f}s")


def test_criterion_3_safety_frequency():
    traces = run_config("prop2_alpha09", keep_regions=True)
    grid = traces[0].final_region.grid
    unsafe_points = ~ExampleSystem(1).ground_truth_region(grid, 0.8, 1, mc_samples=10_000)
    bad = total = 0
    for trace in traces:
        for member in trace.regions[1:]:
            bad += bool((member & unsafe_points).any())
            total += 1
    freq = bad / total
    assert record(3, freq <= 0.2, f"fraction of iterations with an unsafe point in the region={freq:.3f} "
                                  f"({bad}/{total}, want <= 0.20)")


def test_criterion_4_ablation_direction():
    seeds = range(10)
    full = mean_of(run_config("scenario1", seeds), "unsafe_count")
    no_prior = mean_of(run_config("ablation_no_prior", seeds), "unsafe_count")
    no_safety = mean_of(run_config("ablation_no_safety", seeds), "unsafe_count")
    no_cost = mean_of(run_config("ablation_no_cost_scaling", seeds), "unsafe_count")
    ok = no_prior >= full and no_safety >= full
    assert record(4, ok, f"unsafe: full={full:.2f} no_prior={no_prior:.2f} no_safety={no_safety:.2f} "
                         f"(gated) no_cost_scaling={no_cost:.2f} (reported)")


def test_criterion_5_gp_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 51))
        centres, weights = rng.random((3, 2)), rng.uniform(0.05, 0.5, 3)

        def sigma_fn(p, c=centres, w=weights):
            p = np.atleast_2d(p)
            return 0.05 + (w * np.exp(-((p[:, None, :] - c) ** 2).sum(-1) * 4)).sum(-1)

        def mean_fn(p, a=rng.uniform(-1, 1, 2)):
            p = np.atleast_2d(p)
            return 0.5 + 0.2 * np.sin(p @ a * 3)

        ell = float(rng.uniform(0.3, 1.5))
        x = rng.random((n, 2))
        y = rng.random(n)
        noise = rng.uniform(0.05, 0.3, n)
        q = rng.random((40, 2))
        gp = GaussianProcess(mean_fn, PriorScaledKernel(sigma_fn, [0, 0], [1, 1], ell), list(zip(x, y, noise)))
        mean, var = gp.posterior(q)
        ref_mean, ref_var = dense_posterior(x, y, noise, q, mean_fn, sigma_fn, ell)
        worst = max(worst, np.abs(mean - ref_mean).max(), np.abs(var - np.maximum(ref_var, 0)).max())
    assert record(5, worst <= 1e-8, f"max |difference| over 100 instances={worst:.2e} (want <= 1e-8)")


def test_criterion_6_d_separation_oracle():
    rng = np.random.default_rng(6)
    queries = mismatches = 0
    for _ in range(500):
        n = int(rng.integers(2, 11))
        names, edges = random_dag(rng, n, float(rng.uniform(0.1, 0.5)))
        g = build_graph([(x, "observable") for x in names], edges)
        for _ in range(4):
            perm = list(rng.permutation(names))
            k = int(rng.integers(0, min(3, n - 2) + 1))
            a, b, z = {perm[0]}, {perm[1]}, set(perm[2:2 + k])
            queries += 1
            mismatches += g.d_separated(a, b, z) != brute_d_separated(edges, a, b, z)
    assert record(6, mismatches == 0, f"{mismatches} mismatches in {queries} queries over 500 DAGs")


def test_criterion_7_confidence_arithmetic():
    theory = ConfidenceParams(rkhs_bound=1.0, alpha=0.5, mode="theoretical")
    checks = [
        (information_gain([[1.0]], 1.0), 0.5 * math.log(2)),
        (information_gain(np.zeros((2, 2)), 1.0), 0.0),
        (information_gain(np.eye(2), 0.5), math.log(5)),
        (beta(9, theory, 0.0), 2.0),
        (beta(2, theory, 0.1), 2 + 30 * math.log(4) ** 3),
        (beta(3, ConfidenceParams(beta_sqrt=2.0), 0.0), 4.0),
    ]
    worst = max(abs(got - want) for got, want in checks)
    assert record(7, worst <= 1e-9, f"max |error|={worst:.1e} over {len(checks)} closed forms (want <= 1e-9)")


def test_criterion_8_causal_prior_consistency():
    env = ExampleSystem(1, 0)
    data = ObservationDataset.from_rows([env.observe() for _ in range(10_000)])
    graph = CausalGraph.load(ROOT / "fixtures" / "edge_server.json")
    spec = parse_spec("always[H=1](Y < 50)")
    model = estimate_prior(data, graph, ("C", "M"), spec, axes=make_axes([(0, 1), (0, 1)], 50),
                           bootstrap_reps=10)
    supported = np.flatnonzero(model.support.ravel())
    picks = supported[np.linspace(0, len(supported) - 1, 10).round().astype(int)]
    errors = []
    for i in picks:
        c, m = model.grid[i]
        truth = scenario1_satisfaction_mc(c, m, horizon=1, samples=1_000_000)
        errors.append(abs(model.mu.ravel()[i] - truth))
    worst = max(errors)
    assert record(8, worst <= 0.1, f"max |mu - truth| at 10 supported points={worst:.3f} (want <= 0.1)")


def test_criterion_9_hsic_calibration():
    runs, n = 200, 200
    rejections = hits = 0
    for s in range(runs):
        rng = np.random.default_rng(90_000 + s)
        x, y = rng.normal(size=n), rng.normal(size=n)
        rejections += hsic_test(x, y, permutations=200, seed=s).p_value < 0.05
        y2 = x ** 2 + 0.5 * rng.normal(size=n)
        hits += hsic_test(x, y2, permutations=200, seed=s).p_value < 0.05
    size, power = rejections / runs, hits / runs
    ok = size <= 0.10 and power >= 0.95
    assert record(9, ok, f"rejection rate under independence={size:.3f} (want <= 0.10) "
                         f"power under y=x^2+noise={power:.3f} (want >= 0.95)")


def test_criterion_10_determinism(tmp_path):
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = main(["run", "--config", str(CONFIGS / "scenario1.json"), "--seeds", "7", "--out", str(out)])
        assert code == 0
        outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    same = outputs[0] == outputs[1]
    assert record(10, same, f"{len(outputs[0])} output files byte-identical across two runs: {same}")


if __name__ == "__main__":
    import tempfile

    failed = 0
    checks = {int(name.split("_")[2]): fn for name, fn in globals().items() if name.startswith("test_criterion_")}
    for _, fn in sorted(checks.items()):
        try:
            if "tmp_path" in fn.__code__.co_varnames[:fn.__code__.co_argcount]:
                with tempfile.TemporaryDirectory() as tmp:
                    fn(Path(tmp))
            else:
                fn()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
