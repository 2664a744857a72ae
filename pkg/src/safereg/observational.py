"""Passive monitoring data: ingestion, causal-prior estimation, graph validation."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from safereg.errors import (
    DataError,
    DataIoError,
    EmptyDataset,
    EmptyStratum,
    InsufficientData,
    LengthMismatch,
    MissingColumn,
    NotAControl,
    NotIdentifiable,
    SchemaMismatch,
    TooFewSamples,
)
from safereg.graph import HIDDEN_KINDS, CausalGraph, VariableKind
from safereg.speclogic import SpecFormula, window_outcomes

log = logging.getLogger(__name__)

DEFAULT_SIGMA_MAX = 0.5
DEFAULT_SUPPORT_THRESHOLD = 5.0
DEFAULT_BINS = 10
# kernel mass below which a stratum counts as having no matching rows
_EMPTY_STRATUM_WEIGHT = 1e-8


class EmptyStratumWarning(UserWarning):
    pass


class ObservationDataset:
    """Equal-length named numeric columns (one row per time step)."""

    def __init__(self, columns: Mapping[str, Sequence[float]]):
        cols = {}
        for name, values in columns.items():
            if name in cols:
                raise DataError(f"duplicate column {name!r}")
            cols[str(name)] = np.asarray(values, dtype=float).ravel()
        if not cols:
            raise EmptyDataset("dataset has no columns")
        lengths = {len(v) for v in cols.values()}
        if len(lengths) != 1:
            raise LengthMismatch(f"columns have different lengths {sorted(lengths)}")
        if lengths.pop() < 1:
            raise EmptyDataset("dataset has no rows")
        self.columns = cols

    @classmethod
    def from_rows(cls, rows: Sequence[Mapping]) -> "ObservationDataset":
        if not rows:
            raise EmptyDataset("no rows")
        names = list(rows[0])
        return cls({k: [float(r[k]) for r in rows] for k in names})

    @property
    def n(self) -> int:
        return len(next(iter(self.columns.values())))

    @property
    def names(self) -> tuple:
        return tuple(self.columns)

    def __len__(self) -> int:
        return self.n

    def __contains__(self, name) -> bool:
        return name in self.columns

    def __getitem__(self, name) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise MissingColumn(f"dataset has no column {name!r}") from None

    def require(self, names) -> None:
        missing = [n for n in names if n not in self.columns]
        if missing:
            raise MissingColumn(f"dataset lacks columns {missing}")

    def take(self, index) -> "ObservationDataset":
        return ObservationDataset({k: v[index] for k, v in self.columns.items()})

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.names)
            for i in range(self.n):
                writer.writerow([repr(float(self.columns[k][i])) for k in self.names])


def load_csv(path, schema: Sequence[str] | None = None) -> ObservationDataset:
    """Read a headed CSV of numbers; ``schema`` names the columns that must exist.

    Rows are numbered from 1 for the first data row in errors.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataIoError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDataset(f"{path} is empty") from None
        except csv.Error as exc:
            raise DataIoError(f"{path}: {exc}") from exc
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise SchemaMismatch("duplicate column names in header", row=0)
        wanted = list(header) if schema is None else list(schema)
        for name in wanted:
            if name not in header:
                raise SchemaMismatch(f"header lacks column {name!r}", row=0, column=name)
        index = {name: header.index(name) for name in wanted}
        data = {name: [] for name in wanted}
        try:
            for rownum, record in enumerate(reader, start=1):
                if not record:
                    continue
                if len(record) != len(header):
                    raise SchemaMismatch(
                        f"row {rownum} has {len(record)} fields, expected {len(header)}", row=rownum)
                for name, j in index.items():
                    try:
                        data[name].append(float(record[j]))
                    except ValueError:
                        raise SchemaMismatch(
                            f"row {rownum}, column {name!r}: cannot parse {record[j]!r}",
                            row=rownum, column=name) from None
        except csv.Error as exc:
            raise DataIoError(f"{path}: {exc}") from exc
    if not data or not next(iter(data.values())):
        raise EmptyDataset(f"{path} has no data rows")
    return ObservationDataset(data)


# --- grids ---------------------------------------------------------------

def make_axes(domains: Sequence[tuple], resolution) -> tuple:
    """Evenly spaced axes (endpoints included) for each control domain."""
    if isinstance(resolution, int):
        resolution = [resolution] * len(domains)
    axes = []
    for (lo, hi), r in zip(domains, resolution):
        if int(r) < 2:
            raise ValueError("grid resolution must be >= 2 per dimension")
        axes.append(np.linspace(lo, hi, int(r)))
    return tuple(axes)


def grid_points(axes) -> np.ndarray:
    """Cartesian product of ``axes`` in lexicographic order, shape (n, d)."""
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass
class EffectModel:
    """Per-grid-point estimate of P(spec holds | do(controls = u)).

    ``mu``/``sigma``/``support`` are flat arrays aligned with
    :func:`grid_points` of ``axes``.
    """

    controls: tuple
    axes: tuple
    mu: np.ndarray
    sigma: np.ndarray
    support: np.ndarray
    sigma_max: float = DEFAULT_SIGMA_MAX
    adjustment: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.controls = tuple(self.controls)
        self.axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        self.support = np.asarray(self.support, dtype=bool)
        size = int(np.prod([len(a) for a in self.axes]))
        for name in ("mu", "sigma", "support"):
            if getattr(self, name).shape != (size,):
                raise ValueError(f"{name} must have {size} entries")
        if np.any(self.mu < 0) or np.any(self.mu > 1):
            raise ValueError("mu must lie in [0, 1]")
        if np.any(self.sigma < 0):
            raise ValueError("sigma must be nonnegative")

    @classmethod
    def uninformative(cls, controls, axes, sigma_max: float = DEFAULT_SIGMA_MAX) -> "EffectModel":
        size = int(np.prod([len(a) for a in axes]))
        return cls(controls, axes, np.full(size, 0.5), np.full(size, sigma_max),
                   np.zeros(size, dtype=bool), sigma_max)

    @property
    def grid(self) -> np.ndarray:
        return grid_points(self.axes)

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.axes)

    @property
    def domains(self) -> tuple:
        return tuple((float(a[0]), float(a[-1])) for a in self.axes)

    def initial_region(self, delta: float) -> np.ndarray:
        """Supported grid points whose inferred effect reaches ``delta``."""
        return (self.mu >= delta) & self.support

    def to_dict(self) -> dict:
        return {
            "controls": list(self.controls),
            "axes": [a.tolist() for a in self.axes],
            "grid": self.grid.tolist(),
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
            "support": self.support.tolist(),
            "sigma_max": self.sigma_max,
            "adjustment": list(self.adjustment),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "EffectModel":
        return cls(data["controls"], data["axes"], data["mu"], data["sigma"], data["support"],
                   data.get("sigma_max", DEFAULT_SIGMA_MAX), tuple(data.get("adjustment", ())),
                   dict(data.get("meta", {})))

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text


# --- stratification ------------------------------------------------------

def stratify(columns: Sequence[np.ndarray], n_bins: int = DEFAULT_BINS) -> np.ndarray:
    """Joint stratum codes; variables with more than ``n_bins`` levels get equal-frequency bins."""
    if not columns:
        return np.zeros(0, dtype=int)
    codes = []
    for x in columns:
        x = np.asarray(x, dtype=float)
        levels = np.unique(x)
        if len(levels) <= n_bins:
            codes.append(np.searchsorted(levels, x))
        else:
            edges = np.quantile(x, np.linspace(0, 1, n_bins + 1)[1:-1])
            codes.append(np.searchsorted(np.unique(edges), x, side="right"))
    _, joint = np.unique(np.stack(codes, axis=1), axis=0, return_inverse=True)
    return joint.ravel()


def adjust_effect(dataset: ObservationDataset, outcome: str, treatment, adjustment_set,
                  value, n_bins: int = DEFAULT_BINS, tolerance: float = 0.0,
                  on_empty: str = "prior") -> float:
    """Backdoor adjustment sum_z P(outcome | treatment = value, z) P(z).

    Rows match the treatment when every treatment column is within
    ``tolerance`` of ``value``.  A stratum with no matching rows contributes
    0.5 (``on_empty="prior"``, with an :class:`EmptyStratumWarning`) or raises
    :class:`EmptyStratum` (``on_empty="raise"``).
    """
    treatment = [treatment] if isinstance(treatment, str) else list(treatment)
    values = np.atleast_1d(np.asarray(value, dtype=float))
    if len(values) != len(treatment):
        raise ValueError("one value per treatment variable required")
    adjustment_set = sorted(adjustment_set or ())
    dataset.require([outcome, *treatment, *adjustment_set])

    y = dataset[outcome]
    match = np.ones(dataset.n, dtype=bool)
    for name, v in zip(treatment, values):
        match &= np.abs(dataset[name] - v) <= tolerance

    if not adjustment_set:
        if not match.any():
            return _empty(on_empty, "no rows match the treatment value")
        return float(y[match].mean())

    strata = stratify([dataset[z] for z in adjustment_set], n_bins)
    total = 0.0
    for code in np.unique(strata):
        in_z = strata == code
        p_z = in_z.mean()
        hit = in_z & match
        if hit.any():
            total += p_z * float(y[hit].mean())
        else:
            total += p_z * _empty(on_empty, f"stratum {code} has no treatment-matching rows")
    return float(total)


def _empty(on_empty: str, message: str) -> float:
    if on_empty == "raise":
        raise EmptyStratum(message)
    warnings.warn(message, EmptyStratumWarning, stacklevel=3)
    return 0.5


# --- causal prior --------------------------------------------------------

def _normalize(values: np.ndarray, domains) -> np.ndarray:
    lo = np.array([d[0] for d in domains], dtype=float)
    hi = np.array([d[1] for d in domains], dtype=float)
    return (values - lo) / (hi - lo)


def control_domains(graph: CausalGraph, controls: Sequence[str]) -> tuple:
    doms = []
    for c in controls:
        node = graph.node(c)
        if node.kind is not VariableKind.CONTROL:
            raise NotAControl(f"{c!r} is not a control input")
        doms.append(node.domain if node.domain is not None else (0.0, 1.0))
    return tuple(doms)


def estimate_prior(dataset: ObservationDataset, graph: CausalGraph, controls: Sequence[str],
                   spec: SpecFormula, axes=None, bandwidth: float = 0.1,
                   bootstrap_reps: int = 50, sigma_max: float = DEFAULT_SIGMA_MAX,
                   support_threshold: float = DEFAULT_SUPPORT_THRESHOLD,
                   n_bins: int = DEFAULT_BINS, seed: int = 0, resolution: int = 50) -> EffectModel:
    """Backdoor-adjusted, kernel-smoothed satisfaction probability on a control grid.

    Each overlapping window of ``H + 1`` rows yields one Boolean outcome.  A
    window's weight for grid point ``u`` is the product over its rows of a
    Gaussian kernel (bandwidth in normalized control units) between the
    row's controls and ``u``, so a window only counts where the controls
    stayed near ``u`` throughout.  Adjustment variables are read at the
    window start and stratified.  ``sigma`` is the bootstrap standard
    deviation over resampled windows, capped at ``sigma_max``.
    """
    controls = tuple(controls)
    outcomes = spec.metrics
    domains = control_domains(graph, controls)
    adjustment = graph.backdoor_set(set(controls), set(outcomes))
    if adjustment is None:
        raise NotIdentifiable(f"effect of do({', '.join(controls)}) on {list(outcomes)} is not identifiable")
    adjustment = tuple(sorted(adjustment))
    dataset.require([*controls, *adjustment, *outcomes])
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")

    if axes is None:
        axes = make_axes(domains, resolution)
    axes = tuple(np.asarray(a, dtype=float) for a in axes)
    grid = grid_points(axes)

    phi = window_outcomes(spec, {m: dataset[m] for m in outcomes}).astype(float)
    n_win = len(phi)
    if n_win < 1:
        raise InsufficientData(f"need at least {spec.length} rows, have {dataset.n}")

    x = _normalize(np.stack([dataset[c] for c in controls], axis=1), domains)
    u = _normalize(grid, domains)
    rows = spec.length
    s1 = sum(x[lag:lag + n_win] for lag in range(rows))
    s2 = sum((x[lag:lag + n_win] ** 2).sum(axis=1) for lag in range(rows))

    strata = stratify([dataset[z][:n_win] for z in adjustment], n_bins) if adjustment else np.zeros(n_win, int)
    codes = np.unique(strata)
    members = [np.flatnonzero(strata == c) for c in codes]

    boot_counts = np.empty((bootstrap_reps, n_win))
    for r in range(bootstrap_reps):
        rng = np.random.default_rng([seed, r])
        boot_counts[r] = np.bincount(rng.integers(0, n_win, n_win), minlength=n_win)

    mu = np.empty(len(grid))
    sigma = np.empty(len(grid))
    support = np.empty(len(grid), dtype=bool)
    chunk = max(1, 4_000_000 // max(n_win, 1))
    for start in range(0, len(grid), chunk):
        uc = u[start:start + chunk]
        sq = s2[:, None] - 2.0 * s1 @ uc.T + rows * (uc ** 2).sum(axis=1)[None, :]
        w = np.exp(-np.maximum(sq, 0.0) / (2.0 * bandwidth ** 2))
        wphi = w * phi[:, None]

        est = np.zeros(len(uc))
        boot = np.zeros((bootstrap_reps, len(uc)))
        total_w = np.zeros(len(uc))
        empty_any = np.zeros(len(uc), dtype=bool)
        for idx in members:
            p_z = len(idx) / n_win
            wz = w[idx].sum(axis=0)
            nz = wphi[idx].sum(axis=0)
            empty = wz < _EMPTY_STRATUM_WEIGHT
            empty_any |= empty
            est += p_z * np.where(empty, 0.5, nz / np.where(empty, 1.0, wz))
            total_w += wz

            cz = boot_counts[:, idx]
            pz_b = cz.sum(axis=1, keepdims=True) / n_win
            wz_b = cz @ w[idx]
            nz_b = cz @ wphi[idx]
            empty_b = wz_b < _EMPTY_STRATUM_WEIGHT
            boot += pz_b * np.where(empty_b, 0.5, nz_b / np.where(empty_b, 1.0, wz_b))

        ok = (total_w >= support_threshold) & ~empty_any
        sd = boot.std(axis=0, ddof=1) if bootstrap_reps > 1 else np.zeros(len(uc))
        mu[start:start + chunk] = np.where(ok, np.clip(est, 0.0, 1.0), 0.5)
        sigma[start:start + chunk] = np.where(ok, np.minimum(sd, sigma_max), sigma_max)
        support[start:start + chunk] = ok

    log.debug("prior: %d windows, %d/%d grid points supported", n_win, support.sum(), len(grid))
    return EffectModel(controls, axes, mu, sigma, support, sigma_max, adjustment,
                       {"windows": n_win, "bandwidth": bandwidth, "bootstrap_reps": bootstrap_reps,
                        "support_threshold": support_threshold})


# --- HSIC ----------------------------------------------------------------

class HsicResult(NamedTuple):
    statistic: float
    p_value: float


def _gram(x: np.ndarray) -> np.ndarray:
    x = x.reshape(len(x), -1)
    sq = (x ** 2).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    off = d2[np.triu_indices(len(x), k=1)]
    off = off[off > 0]
    # median heuristic: bandwidth = median pairwise distance
    width2 = float(np.median(off)) if off.size else 1.0
    return np.exp(-d2 / (2.0 * width2))


def hsic_test(x, y, permutations: int = 500, seed: int = 0) -> HsicResult:
    """Biased HSIC statistic with Gaussian kernels and a permutation p-value.

    ``p = (1 + #{permuted >= observed}) / (permutations + 1)``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y):
        raise LengthMismatch(f"x has {len(x)} samples, y has {len(y)}")
    n = len(x)
    if n < 10:
        raise TooFewSamples(f"HSIC needs at least 10 samples, got {n}")
    if permutations < 100:
        raise ValueError("use at least 100 permutations")
    k = _gram(x)
    l = _gram(y)
    kc = k - k.mean(axis=0, keepdims=True)
    kc = kc - kc.mean(axis=1, keepdims=True)
    stat = float((kc * l).sum()) / n ** 2
    rng = np.random.default_rng(seed)
    exceed = 0
    for _ in range(permutations):
        p = rng.permutation(n)
        if float((kc * l[np.ix_(p, p)]).sum()) / n ** 2 >= stat:
            exceed += 1
    return HsicResult(stat, (1 + exceed) / (permutations + 1))


def _residualize(target: np.ndarray, given: np.ndarray) -> np.ndarray:
    """Residuals of a Nadaraya-Watson regression of ``target`` on ``given``."""
    z = given.reshape(len(given), -1)
    scale = z.std(axis=0)
    z = (z - z.mean(axis=0)) / np.where(scale > 0, scale, 1.0)
    n, d = z.shape
    h = n ** (-1.0 / (d + 4))
    sq = (z ** 2).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * z @ z.T, 0.0)
    w = np.exp(-d2 / (2.0 * h * h))
    fitted = w @ target / w.sum(axis=1)
    return target - fitted


@dataclass(frozen=True)
class IndependenceCheck:
    a: str
    b: str
    given: tuple
    statistic: float
    p_value: float
    consistent: bool

    @property
    def label(self) -> str:
        given = ",".join(self.given)
        return f"{self.a} _||_ {self.b}" + (f" | {given}" if given else "")

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "given": list(self.given), "statistic": self.statistic,
                "p_value": self.p_value, "consistent": self.consistent}


def validate_graph(dataset: ObservationDataset, graph: CausalGraph, max_conditioning_size: int = 1,
                   permutations: int = 500, seed: int = 0, alpha: float = 0.05,
                   max_samples: int = 500) -> list:
    """Test every graph-implied independence among variables present in the data.

    Conditional relations are tested as HSIC between kernel-regression
    residuals given the separating set.  At most ``max_samples`` evenly
    spaced rows are used.
    """
    usable = {n for n in graph.nodes if n in dataset and graph.kind(n) not in HIDDEN_KINDS}
    if dataset.n > max_samples:
        index = np.linspace(0, dataset.n - 1, max_samples).round().astype(int)
        dataset = dataset.take(index)
    report = []
    for i, (a, b, z) in enumerate(graph.implied_independencies(max_conditioning_size)):
        if a not in usable or b not in usable or any(v not in usable for v in z):
            continue
        xa, xb = dataset[a], dataset[b]
        if z:
            given = np.stack([dataset[v] for v in z], axis=1)
            xa, xb = _residualize(xa, given), _residualize(xb, given)
        stat, p = hsic_test(xa, xb, permutations, seed=seed * 100_003 + i)
        report.append(IndependenceCheck(a, b, tuple(z), stat, p, bool(p >= alpha)))
    return report
