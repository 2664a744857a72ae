"""Safety specifications: conjunctions of threshold predicates under "always".

Grammar::

    always[H=<int>] ( <metric> <cmp> <number> { and <metric> <cmp> <number> } )

with ``<cmp>`` one of ``<  >  <=  >=  ≤  ≥``.
"""

from __future__ import annotations

import math
import operator
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from safereg.errors import (
    LengthMismatch,
    MissingMetric,
    NonFiniteMetric,
    SpecError,
    SpecSyntaxError,
    UnknownComparator,
)

_COMPARATORS = {
    "<": operator.lt,
    ">": operator.gt,
    "<=": operator.le,
    ">=": operator.ge,
}
_ALIASES = {"≤": "<=", "≥": ">="}


@dataclass(frozen=True)
class Predicate:
    metric: str
    comparator: str
    threshold: float

    def __post_init__(self):
        cmp = _ALIASES.get(self.comparator, self.comparator)
        if cmp not in _COMPARATORS:
            raise UnknownComparator(self.comparator, 0)
        object.__setattr__(self, "comparator", cmp)
        object.__setattr__(self, "threshold", float(self.threshold))

    def holds(self, value) -> bool:
        return bool(_COMPARATORS[self.comparator](value, self.threshold))

    def holds_array(self, values: np.ndarray) -> np.ndarray:
        return _COMPARATORS[self.comparator](values, self.threshold)

    def __str__(self):
        return f"{self.metric} {self.comparator} {self.threshold:g}"


@dataclass(frozen=True)
class SpecFormula:
    predicates: tuple
    horizon: int

    def __post_init__(self):
        preds = tuple(self.predicates)
        if not preds:
            raise SpecError("a specification needs at least one predicate")
        if int(self.horizon) != self.horizon or self.horizon < 0:
            raise SpecError("horizon must be a nonnegative integer")
        object.__setattr__(self, "predicates", preds)
        object.__setattr__(self, "horizon", int(self.horizon))

    @property
    def metrics(self) -> tuple:
        seen = []
        for p in self.predicates:
            if p.metric not in seen:
                seen.append(p.metric)
        return tuple(seen)

    @property
    def length(self) -> int:
        """Number of trajectory rows one evaluation consumes."""
        return self.horizon + 1

    def check_metrics(self, graph) -> None:
        """Ensure every predicate refers to a target variable of ``graph``."""
        from safereg.graph import VariableKind

        for m in self.metrics:
            if m not in graph.nodes:
                raise MissingMetric(f"{m!r} is not a node of the graph")
            if graph.kind(m) is not VariableKind.TARGET:
                raise SpecError(f"{m!r} is not a target metric")

    def rows_hold(self, columns: Mapping[str, np.ndarray]) -> np.ndarray:
        """Per-row truth of the predicate conjunction over column arrays."""
        ok = None
        for p in self.predicates:
            try:
                values = np.asarray(columns[p.metric], dtype=float)
            except KeyError:
                raise MissingMetric(f"metric {p.metric!r} missing") from None
            if not np.all(np.isfinite(values)):
                raise NonFiniteMetric(f"non-finite value in metric {p.metric!r}")
            hold = p.holds_array(values)
            ok = hold if ok is None else ok & hold
        return ok

    def __str__(self):
        body = " and ".join(str(p) for p in self.predicates)
        return f"always[H={self.horizon}]({body})"


@dataclass(frozen=True)
class Trajectory:
    """Consecutive rows ``(t, {metric: value})`` with unit time steps."""

    rows: tuple

    def __post_init__(self):
        rows = tuple((int(t), dict(values)) for t, values in self.rows)
        for (t0, _), (t1, _) in zip(rows, rows[1:]):
            if t1 != t0 + 1:
                raise SpecError(f"time index jumps from {t0} to {t1}")
        object.__setattr__(self, "rows", rows)

    @classmethod
    def from_records(cls, records: Iterable[Mapping], time_key: str = "t") -> "Trajectory":
        rows = []
        for i, rec in enumerate(records):
            t = rec.get(time_key, i)
            rows.append((t, {k: v for k, v in rec.items() if k != time_key}))
        return cls(tuple(rows))

    def __len__(self):
        return len(self.rows)


def evaluate(spec: SpecFormula, traj) -> int:
    """1 iff every predicate holds at every row of the (H+1)-row trajectory."""
    if not isinstance(traj, Trajectory):
        traj = Trajectory.from_records(traj)
    if len(traj) != spec.length:
        raise LengthMismatch(f"expected {spec.length} rows, got {len(traj)}")
    result = 1
    for t, values in traj.rows:
        for p in spec.predicates:
            if p.metric not in values:
                raise MissingMetric(f"metric {p.metric!r} missing at t={t}")
            v = float(values[p.metric])
            if not math.isfinite(v):
                raise NonFiniteMetric(f"metric {p.metric!r} is {v} at t={t}")
            if not p.holds(v):
                # keep scanning so malformed later rows still raise
                result = 0
    return result


def window_outcomes(spec: SpecFormula, columns: Mapping[str, np.ndarray]) -> np.ndarray:
    """Outcome of ``spec`` on every overlapping (H+1)-row window of a column table.

    Entry ``s`` covers rows ``s .. s+H``; the result has ``n - H`` entries.
    """
    ok = spec.rows_hold(columns)
    n = ok.shape[0] - spec.horizon
    if n <= 0:
        return np.zeros(0, dtype=np.int8)
    out = np.ones(n, dtype=bool)
    for lag in range(spec.length):
        out &= ok[lag:lag + n]
    return out.astype(np.int8)


_TOKEN = re.compile(
    r"\s*(?:(?P<num>[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<cmp>[<>=!≤≥]+)"
    r"|(?P<punct>[\[\]()])"
    r"|(?P<bad>\S))"
)


def _tokenize(text: str) -> list:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            break
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self, kind, value=None, what=None):
        tok = self.tokens[self.i]
        if tok[0] != kind or (value is not None and tok[1] != value):
            expected = what or repr(value) if value is not None else what or kind
            raise SpecSyntaxError(f"expected {expected}, found {tok[1] or 'end of input'!r}", tok[2])
        self.i += 1
        return tok

    def parse(self) -> SpecFormula:
        self.take("name", "always")
        self.take("punct", "[")
        self.take("name", "H")
        tok = self.peek()
        if tok[0] != "cmp" or tok[1] != "=":
            raise SpecSyntaxError("expected '='", tok[2])
        self.i += 1
        num = self.take("num", what="integer horizon")
        if not re.fullmatch(r"\d+", num[1]):
            raise SpecSyntaxError("horizon must be a nonnegative integer", num[2])
        horizon = int(num[1])
        self.take("punct", "]")
        self.take("punct", "(")
        predicates = [self.predicate()]
        while self.peek()[0] == "name" and self.peek()[1] == "and":
            self.i += 1
            predicates.append(self.predicate())
        self.take("punct", ")")
        self.take("end", what="end of input")
        return SpecFormula(tuple(predicates), horizon)

    def predicate(self) -> Predicate:
        metric = self.take("name", what="metric name")
        if metric[1] in ("and", "always"):
            raise SpecSyntaxError("expected metric name", metric[2])
        cmp = self.take("cmp", what="comparator")
        symbol = _ALIASES.get(cmp[1], cmp[1])
        if symbol not in _COMPARATORS:
            if set(symbol) <= set("<>") and len(symbol) > 1:
                raise SpecSyntaxError(f"malformed comparator {cmp[1]!r}", cmp[2])
            raise UnknownComparator(cmp[1], cmp[2])
        num = self.take("num", what="number")
        return Predicate(metric[1], symbol, float(num[1]))


def parse_spec(text: str) -> SpecFormula:
    """Parse a specification string; errors carry the character position."""
    return _Parser(text).parse()


def evaluate_rows(spec: SpecFormula, rows: Sequence[Mapping]) -> int:
    """Evaluate over plain dict rows (as returned by environments)."""
    return evaluate(spec, Trajectory.from_records(rows))
