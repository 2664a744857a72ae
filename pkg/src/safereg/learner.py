"""Safe-region estimation, intervention selection and the online learning loop."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import norm

from safereg.errors import ConfigError, EnvironmentFailure, MissingTruthFlags, NotIdentifiable
from safereg.gp import ConfidenceParams, GaussianProcess, beta, kappa, max_information_gain
from safereg.graph import CausalGraph, VariableKind
from safereg.observational import (
    EffectModel,
    ObservationDataset,
    control_domains,
    estimate_prior,
    grid_points,
    make_axes,
)
from safereg.speclogic import SpecFormula, evaluate_rows

log = logging.getLogger(__name__)

FALLBACK_RULES = ("lcb", "prob")


@dataclass
class ColConfig:
    monitoring_steps: int = 10
    horizon: int = 1
    delta: float = 0.8
    alpha: float = 0.8
    budget: float = 20.0
    resolution: int = 50
    mode: str = "practical"
    beta_sqrt: float = 2.0
    rkhs_bound: float = 1.0
    noise_std: float = 0.05
    use_causal_prior: bool = True
    use_safety_constraint: bool = True
    use_cost_scaling: bool = True
    window: int = 0
    seed: int = 0
    controls: tuple | None = None
    lengthscale: float = 1.0
    sigma_max: float = 0.5
    bandwidth: float = 0.1
    bootstrap_reps: int = 50
    support_threshold: float = 5.0
    mc_samples: int = 10_000
    convergence_eps: float = 0.01
    convergence_patience: int = 3
    fallback: str = "prob"

    def __post_init__(self):
        def bad(name, why):
            raise ConfigError(f"{name}: {why}")

        if not 0.0 < self.delta < 1.0:
            bad("delta", f"must lie in (0, 1), got {self.delta}")
        if not 0.0 < self.alpha < 1.0:
            bad("alpha", f"must lie in (0, 1), got {self.alpha}")
        if int(self.resolution) < 2:
            bad("resolution", "grid resolution must be >= 2 per dimension")
        if self.monitoring_steps < 0:
            bad("monitoring_steps", "must be >= 0")
        if self.horizon < 0:
            bad("horizon", "must be >= 0")
        if self.budget < 0:
            bad("budget", "must be >= 0")
        if self.window < 0:
            bad("window", "must be >= 0 (0 disables forgetting)")
        if self.noise_std < 0:
            bad("noise_std", "must be >= 0")
        if self.mode not in ("practical", "theoretical"):
            bad("mode", "must be 'practical' or 'theoretical'")
        if self.sigma_max <= 0:
            bad("sigma_max", "must be positive")
        if self.lengthscale <= 0:
            bad("lengthscale", "must be positive")
        if self.fallback not in FALLBACK_RULES:
            bad("fallback", f"must be one of {FALLBACK_RULES}")
        if self.controls is not None:
            self.controls = tuple(self.controls)

    @property
    def confidence(self) -> ConfidenceParams:
        return ConfidenceParams(rkhs_bound=self.rkhs_bound, alpha=self.alpha,
                                noise_bound=max(self.noise_std, 1e-6), mode=self.mode,
                                beta_sqrt=self.beta_sqrt)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["controls"] = list(self.controls) if self.controls is not None else None
        return d


class CostModel:
    """Intervention cost function plus a hard budget."""

    def __init__(self, fn: Callable, budget: float):
        if budget < 0:
            raise ValueError("budget must be >= 0")
        self.fn = fn
        self.budget = float(budget)
        self.spent = 0.0

    def __call__(self, point) -> float:
        c = float(self.fn(point))
        if not c > 0:
            raise ValueError(f"intervention cost must be positive, got {c}")
        return c

    def costs(self, points) -> np.ndarray:
        return np.array([self(p) for p in np.atleast_2d(points)])

    def affordable(self, amount: float) -> bool:
        return self.spent + amount <= self.budget

    def charge(self, amount: float) -> None:
        if not self.affordable(amount):
            raise ValueError("charge would exceed the budget")
        self.spent += float(amount)


@dataclass
class SafeRegionEstimate:
    grid: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    kappa: np.ndarray
    member: np.ndarray
    beta: float = float("nan")
    delta: float = float("nan")

    @property
    def measure(self) -> float:
        """Counting fraction of grid points inside the region."""
        return float(self.member.mean()) if len(self.member) else 0.0

    @property
    def lower_bound(self) -> np.ndarray:
        return self.mean - self.kappa

    def digest(self) -> str:
        return hashlib.sha256(np.packbits(self.member).tobytes()).hexdigest()[:16]


def estimate_region(gp: GaussianProcess, confidence: ConfidenceParams, delta: float, grid,
                    t: int, gamma_t: float | None = None) -> SafeRegionEstimate:
    """Points whose clamped posterior mean minus the confidence half-width reaches ``delta``."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if len(grid) == 0:
        raise ValueError("grid is empty")
    mean, var = gp.posterior(grid)
    mean = np.clip(mean, 0.0, 1.0)
    if confidence.mode == "theoretical" and gamma_t is None:
        gamma_t = max_information_gain(gp.kernel, grid, t, confidence.noise_bound)
    b = beta(t, confidence, gamma_t or 0.0)
    half = kappa(b, var)
    return SafeRegionEstimate(grid, mean, var, half, mean - half >= delta, b, delta)


def initial_region(gp: GaussianProcess, model: EffectModel, delta: float, grid,
                   confidence: ConfidenceParams) -> SafeRegionEstimate:
    """Region inferred from passive data alone: supported points with prior effect >= delta."""
    mean, var = gp.posterior(grid)
    b = confidence.beta_sqrt ** 2 if confidence.mode == "practical" else float("nan")
    half = kappa(b, var) if confidence.mode == "practical" else np.full(len(grid), np.nan)
    return SafeRegionEstimate(np.asarray(grid), np.clip(mean, 0.0, 1.0), var, half,
                              model.initial_region(delta), b, delta)


def select_intervention(region: SafeRegionEstimate, costs: np.ndarray, use_safety_constraint: bool = True,
                        use_cost_scaling: bool = True):
    """Grid index maximizing posterior std per unit cost over the region.

    Ties go to the lexicographically smallest grid point (the grid is in
    lexicographic order).  Returns ``None`` when the region is empty and the
    safety constraint is on.
    """
    score = np.sqrt(region.variance)
    if use_cost_scaling:
        score = score / costs
    if use_safety_constraint:
        if not region.member.any():
            return None
        score = np.where(region.member, score, -np.inf)
    return int(np.argmax(score))


def fallback_intervention(region: SafeRegionEstimate, costs=None, rule: str = "prob") -> int:
    """Intervention used while the region is empty.

    ``"prob"`` takes the highest posterior probability that the effect reaches
    ``delta``; ``"lcb"`` the highest lower confidence bound.  Ties go to the
    larger std per unit cost, then to the lexicographically smallest point.
    """
    if rule == "prob":
        sd = np.sqrt(region.variance)
        gap = region.mean - region.delta
        safe_sd = np.where(sd > 0, sd, 1.0)
        score = np.where(sd > 0, norm.cdf(gap / safe_sd), (gap >= 0).astype(float))
    elif rule == "lcb":
        score = region.lower_bound
    else:
        raise ValueError(f"unknown fallback rule {rule!r}")
    policy = np.sqrt(region.variance)
    if costs is not None:
        policy = policy / np.asarray(costs, dtype=float)
    tied = score >= score.max() - 1e-12
    return int(np.argmax(np.where(tied, policy, -np.inf)))


@dataclass
class IterationRecord:
    index: int
    step: int
    point: tuple
    cost: float
    spent: float
    outcome: int
    truth_safe: bool | None
    measure: float
    region_hash: str
    fallback: bool


@dataclass
class ColTrace:
    controls: tuple
    config: dict
    initial_measure: float
    initial_hash: str
    records: list = field(default_factory=list)
    regions: list = field(default_factory=list)
    effect_model: EffectModel | None = None
    gp: GaussianProcess | None = None
    final_region: SafeRegionEstimate | None = None
    passive: ObservationDataset | None = None

    @property
    def measures(self) -> list:
        return [self.initial_measure] + [r.measure for r in self.records]

    @property
    def final_measure(self) -> float:
        return self.measures[-1]

    @property
    def spent(self) -> float:
        return self.records[-1].spent if self.records else 0.0

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.config, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def csv_text(self, header: Mapping | None = None) -> str:
        buf = io.StringIO()
        for key, value in (header or {}).items():
            buf.write(f"# {key}={value}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t_k", *self.controls, "cost", "spec_outcome", "truth_safe", "lambda",
                         "spent", "fallback", "region_hash"])
        for r in self.records:
            truth = "" if r.truth_safe is None else int(r.truth_safe)
            writer.writerow([r.step, *(repr(float(x)) for x in r.point), repr(float(r.cost)), r.outcome,
                             truth, repr(float(r.measure)), repr(float(r.spent)), int(r.fallback),
                             r.region_hash])
        return buf.getvalue()

    def to_csv(self, path, header: Mapping | None = None) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.csv_text(header))

    def summary(self, eps: float | None = None, patience: int | None = None) -> dict:
        eps = self.config.get("convergence_eps", 0.01) if eps is None else eps
        patience = self.config.get("convergence_patience", 3) if patience is None else patience
        out = {
            "lambda_final": self.final_measure,
            "lambda_initial": self.initial_measure,
            "interventions": len(self.records),
            "spent": self.spent,
            "fallbacks": sum(r.fallback for r in self.records),
        }
        if self.records and all(r.truth_safe is not None for r in self.records):
            conv = unsafe_interventions_to_converge(self, eps, patience)
            out.update(unsafe_count=conv.count, converged=conv.converged,
                       convergence_step=conv.step,
                       unsafe_total=sum(not r.truth_safe for r in self.records))
        else:
            out.update(unsafe_count=None, converged=None, convergence_step=None, unsafe_total=None)
        return out

    def region_rows(self) -> list:
        region = self.final_region
        rows = []
        for i, p in enumerate(region.grid):
            rows.append([*p.tolist(), float(region.mean[i]), float(region.variance[i]),
                         float(region.kappa[i]), int(region.member[i])])
        return rows


@dataclass(frozen=True)
class Convergence:
    count: int
    converged: bool
    step: int | None


def unsafe_interventions_to_converge(trace: ColTrace, eps: float = 0.01, patience: int = 3) -> Convergence:
    """Unsafe interventions performed before the region size plateaus.

    The plateau starts at the first intervention count ``k`` with a
    nonempty region after which ``patience`` consecutive changes of the
    region size are all below ``eps``.  Without a plateau the whole trace
    is counted and ``converged`` is False.
    """
    if any(r.truth_safe is None for r in trace.records):
        raise MissingTruthFlags("trace lacks ground-truth safety flags")
    lam = trace.measures
    unsafe = [not r.truth_safe for r in trace.records]
    for k in range(len(lam) - patience):
        if lam[k] <= 0.0:
            continue
        if all(abs(lam[j + 1] - lam[j]) < eps for j in range(k, k + patience)):
            return Convergence(int(sum(unsafe[:k])), True, k)
    return Convergence(int(sum(unsafe)), False, None)


def _resolve_controls(config: ColConfig, environment, graph: CausalGraph) -> tuple:
    controls = config.controls or tuple(environment.controls)
    for c in controls:
        if graph.kind(c) is not VariableKind.CONTROL:
            raise ConfigError(f"controls: {c!r} is not a control variable")
    return tuple(controls)


def run_col(config: ColConfig, environment, graph: CausalGraph, spec: SpecFormula,
            cost_fn: Callable | None = None, keep_regions: bool = True) -> ColTrace:
    """Passive monitoring, causal prior, then budgeted safe interventions.

    ``cost_fn`` maps a control vector to a positive cost (default:
    ``environment.cost``).
    """
    controls = _resolve_controls(config, environment, graph)
    spec.check_metrics(graph)
    domains = control_domains(graph, controls)
    axes = make_axes(domains, config.resolution)
    grid = grid_points(axes)
    confidence = config.confidence

    passive = [environment.observe() for _ in range(config.monitoring_steps)]
    dataset = ObservationDataset.from_rows(passive) if passive else None

    if config.use_causal_prior:
        if not graph.is_identifiable(controls, spec.metrics):
            raise NotIdentifiable(f"do({', '.join(controls)}) is not identifiable for {list(spec.metrics)}")
        if dataset is None:
            raise ConfigError("monitoring_steps: the causal prior needs passive observations")
        model = estimate_prior(dataset, graph, controls, spec, axes=axes, bandwidth=config.bandwidth,
                               bootstrap_reps=config.bootstrap_reps, sigma_max=config.sigma_max,
                               support_threshold=config.support_threshold, seed=config.seed)
    else:
        model = EffectModel.uninformative(controls, axes, config.sigma_max)

    prior_gp = GaussianProcess.from_effect_model(model, config.lengthscale)
    gp = prior_gp
    region = initial_region(gp, model, config.delta, grid, confidence)

    cost_model = CostModel(cost_fn or environment.cost, config.budget)
    costs = cost_model.costs(grid)

    trace = ColTrace(controls, config.to_dict(), region.measure, region.digest(),
                     effect_model=model, passive=dataset)
    if keep_regions:
        trace.regions.append(region.member.copy())

    observations: list = []
    k = 0
    while cost_model.spent <= cost_model.budget:
        idx = select_intervention(region, costs, config.use_safety_constraint, config.use_cost_scaling)
        fallback = idx is None
        if fallback:
            idx = fallback_intervention(region, costs, config.fallback)
        if not cost_model.affordable(costs[idx]):
            break
        point = grid[idx]
        target = dict(zip(controls, point.tolist()))
        truth = environment.ground_truth_safe(target, config.delta, config.horizon, config.mc_samples)
        step = environment.clock
        try:
            rows = environment.intervene(target, config.horizon)
        except EnvironmentFailure:
            raise
        except Exception as exc:
            raise EnvironmentFailure(f"intervention {target} failed: {exc}") from exc
        outcome = evaluate_rows(spec, rows)
        cost_model.charge(costs[idx])

        observations.append((point, float(outcome), config.noise_std))
        if config.window > 0:
            observations = observations[-config.window:]
        gp = prior_gp.with_observations(observations)
        k += 1
        region = estimate_region(gp, confidence, config.delta, grid, t=k)
        trace.records.append(IterationRecord(
            index=k, step=step, point=tuple(point.tolist()), cost=float(costs[idx]),
            spent=cost_model.spent, outcome=int(outcome), truth_safe=truth, measure=region.measure,
            region_hash=region.digest(), fallback=fallback))
        if keep_regions:
            trace.regions.append(region.member.copy())
        log.debug("k=%d u=%s outcome=%d lambda=%.3f spent=%.2f", k, target, outcome, region.measure,
                  cost_model.spent)

    assert cost_model.spent <= cost_model.budget + 1e-12
    trace.gp = gp
    trace.final_region = region
    return trace
