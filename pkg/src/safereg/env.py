"""Environments: the interface the learner talks to and the edge-server simulator.

The simulated system has a load ``W``, CPU and memory allocations ``C``,
``M`` in [0, 1] and a response time ``Y`` in milliseconds.  Scenario 1 is
stationary.  Scenario 2 follows scenario 1 up to ``t = 10`` and then ramps
the load deterministically to 1 while the interaction between ``C`` and
``M`` oscillates.
"""

from __future__ import annotations

import math
from typing import Mapping, Protocol, Sequence, runtime_checkable

import numpy as np

from safereg.errors import EnvironmentFailure, OutOfDomain

STRESS_ONSET = 10
LOAD_COEF = 34.3
SQUARE_COEF = 250.0
CROSS_COEF_STATIONARY = 200.0
CROSS_COEF_DRIFT = 350.0
DEFAULT_MC_SEED = 20_251_016


@runtime_checkable
class Environment(Protocol):
    """What :func:`safereg.learner.run_col` needs from a system.

    ``observe`` returns one row of every monitored variable and advances the
    clock by one.  ``intervene`` holds the given controls for ``horizon + 1``
    steps and returns those rows.  ``ground_truth_safe`` returns ``None`` for
    systems without an oracle.
    """

    controls: tuple
    domains: Mapping[str, tuple]
    clock: int

    def reset(self, seed: int) -> None: ...

    def observe(self) -> dict: ...

    def intervene(self, point: Mapping[str, float], horizon: int) -> list: ...

    def ground_truth_safe(self, point: Mapping[str, float], delta: float, horizon: int,
                          mc_samples: int = 10_000): ...


def response_time(w, c, m, t, scenario: int = 1):
    """Response time in ms; vectorizes over numpy inputs."""
    a = np.asarray(c, dtype=float) - 0.5
    b = np.asarray(m, dtype=float) - 0.5
    if scenario == 2 and t > STRESS_ONSET:
        cross = CROSS_COEF_DRIFT * math.sin(t / 2.0)
    else:
        cross = CROSS_COEF_STATIONARY
    y = LOAD_COEF * np.asarray(w, dtype=float) + SQUARE_COEF * a * a + SQUARE_COEF * b * b + cross * a * b
    return float(y) if np.ndim(y) == 0 else y


def scheduled_load(t: int, scenario: int):
    """Deterministic load for the stress phase of scenario 2, else ``None``."""
    if scenario == 2 and t > STRESS_ONSET:
        return min(1.0, 0.1 + 0.1 * (t - STRESS_ONSET))
    return None


def intervention_cost(c: float, m: float) -> float:
    return (1.0 + c - 0.5) ** 2 + (1.0 + m - 0.5) ** 2


def cost(point) -> float:
    """Cost of do(C=c, M=m); accepts a mapping or a (c, m) pair."""
    if isinstance(point, Mapping):
        return intervention_cost(point["C"], point["M"])
    c, m = point
    return intervention_cost(c, m)


_TRUTH_CACHE: dict = {}


class ExampleSystem:
    """Edge-server simulator with a seeded RNG and an integer clock."""

    controls = ("C", "M")
    domains = {"C": (0.0, 1.0), "M": (0.0, 1.0)}
    columns = ("t", "W", "C", "M", "Y")

    def __init__(self, scenario: int = 1, seed: int = 0, threshold: float = 50.0,
                 mc_seed: int = DEFAULT_MC_SEED):
        if scenario not in (1, 2):
            raise ValueError("scenario must be 1 or 2")
        self.scenario = scenario
        self.threshold = float(threshold)
        self.mc_seed = mc_seed
        self.reset(seed)

    def reset(self, seed: int) -> None:
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.clock = 0

    def _load(self, t: int) -> float:
        w = scheduled_load(t, self.scenario)
        if w is None:
            w = float(self.rng.beta(2.0, 5.0))
        return w

    def _row(self, c: float, m: float) -> dict:
        t = self.clock
        w = self._load(t)
        row = {"t": t, "W": w, "C": c, "M": m, "Y": response_time(w, c, m, t, self.scenario)}
        self.clock += 1
        return row

    def observe(self) -> dict:
        c = float(self.rng.beta(0.5, 0.5))
        m = float(self.rng.beta(0.5, 0.5))
        return self._row(c, m)

    step_passive = observe

    def intervene(self, point: Mapping[str, float], horizon: int) -> list:
        c, m = self._check_point(point)
        if horizon < 0:
            raise ValueError("horizon must be >= 0")
        return [self._row(c, m) for _ in range(horizon + 1)]

    def step_intervened(self, c: float, m: float, horizon: int) -> list:
        return self.intervene({"C": c, "M": m}, horizon)

    def _check_point(self, point) -> tuple:
        if isinstance(point, Mapping):
            c, m = float(point["C"]), float(point["M"])
        else:
            c, m = (float(x) for x in point)
        for name, value in (("C", c), ("M", m)):
            if not 0.0 <= value <= 1.0 or not math.isfinite(value):
                raise OutOfDomain(f"{name}={value} outside [0, 1]")
        return c, m

    # --- Monte-Carlo oracle ----------------------------------------------

    def satisfaction_probability(self, points, horizon: int, clock: int | None = None,
                                 mc_samples: int = 10_000) -> np.ndarray:
        """Monte-Carlo P(Y < threshold on every row | do(C, M)) for each point.

        Rows cover ``clock .. clock + horizon`` (default: the current clock).
        Draws come from a dedicated generator so the system's own stream is
        untouched; results are cached per (regime, points).
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        clock = self.clock if clock is None else clock
        times = range(clock, clock + horizon + 1)
        regime = tuple(
            (scheduled_load(t, self.scenario), response_time(0.0, 1.0, 1.0, t, self.scenario))
            for t in times
        )
        if self.scenario == 1:
            regime = ("stationary", horizon + 1)
        random_rows = [t for t in times if scheduled_load(t, self.scenario) is None]
        samples = mc_samples if random_rows else 1
        key = (self.scenario, self.threshold, regime, samples, self.mc_seed, pts.tobytes())
        cached = _TRUTH_CACHE.get(key)
        if cached is not None:
            return cached.copy()

        rng = np.random.default_rng(self.mc_seed)
        loads = []
        for t in times:
            w = scheduled_load(t, self.scenario)
            loads.append(np.full(samples, w) if w is not None else rng.beta(2.0, 5.0, size=samples))
        prob = np.empty(len(pts))
        chunk = max(1, 2_000_000 // samples)
        for start in range(0, len(pts), chunk):
            block = pts[start:start + chunk]
            ok = np.ones((samples, len(block)), dtype=bool)
            for t, w in zip(times, loads):
                quad = response_time(0.0, block[:, 0], block[:, 1], t, self.scenario)
                ok &= (LOAD_COEF * w[:, None] + quad[None, :]) < self.threshold
            prob[start:start + chunk] = ok.mean(axis=0)
        if len(_TRUTH_CACHE) > 4096:
            _TRUTH_CACHE.clear()
        _TRUTH_CACHE[key] = prob
        return prob.copy()

    def ground_truth_safe(self, point, delta: float, horizon: int,
                          mc_samples: int = 10_000, clock: int | None = None) -> bool:
        c, m = self._check_point(point)
        p = self.satisfaction_probability([[c, m]], horizon, clock=clock, mc_samples=mc_samples)[0]
        return bool(p >= delta)

    def ground_truth_region(self, points, delta: float, horizon: int,
                            mc_samples: int = 10_000, clock: int | None = None) -> np.ndarray:
        return self.satisfaction_probability(points, horizon, clock=clock, mc_samples=mc_samples) >= delta

    def cost(self, point) -> float:
        return cost(point)


class CsvReplayEnvironment:
    """Replays recorded passive rows; cannot be intervened on."""

    def __init__(self, dataset, controls: Sequence[str], domains: Mapping[str, tuple]):
        self.dataset = dataset
        self.controls = tuple(controls)
        self.domains = dict(domains)
        self.reset(0)

    def reset(self, seed: int) -> None:
        self.seed = seed
        self.clock = 0

    def observe(self) -> dict:
        if self.clock >= self.dataset.n:
            raise EnvironmentFailure("recorded data exhausted")
        row = {name: float(col[self.clock]) for name, col in self.dataset.columns.items()}
        row.setdefault("t", self.clock)
        self.clock += 1
        return row

    def intervene(self, point, horizon):
        raise EnvironmentFailure("a replayed log cannot be intervened on")

    def ground_truth_safe(self, point, delta, horizon, mc_samples=10_000):
        return None
