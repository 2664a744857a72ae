"""Command-line entry point.

Subcommands::

    safereg run --config configs/scenario1.json [--seeds 0,1] [--out DIR] [--jobs N]
    safereg validate-graph --graph G.json --data log.csv [--out report.json]
    safereg estimate-prior --graph G.json --data log.csv --spec "always[H=1](Y < 50)" --out DIR
    safereg simulate --scenario 1 --steps 10000 --seed 0 --out log.csv

Exit codes: 0 success, 1 runtime failure, 2 configuration or input error,
3 graph inconsistent with data, 4 intervention not identifiable.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np

from safereg.env import CsvReplayEnvironment, ExampleSystem
from safereg.errors import ConfigError, DataError, GraphError, NotIdentifiable, SafeRegError, SpecError
from safereg.graph import CausalGraph, VariableKind
from safereg.learner import ColConfig, run_col
from safereg.observational import (
    ObservationDataset,
    control_domains,
    estimate_prior,
    load_csv,
    make_axes,
    validate_graph,
)
from safereg.speclogic import parse_spec

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_INCONSISTENT = 3
EXIT_NOT_IDENTIFIABLE = 4

log = logging.getLogger("safereg")

_COL_TYPES = {int: "integer", float: "number", bool: "boolean", str: "string"}


def _col_properties() -> dict:
    props = {}
    for f in dataclasses.fields(ColConfig):
        if f.name == "controls":
            props[f.name] = {"type": ["array", "null"], "items": {"type": "string"}}
        elif f.name == "seed":
            continue
        else:
            props[f.name] = {"type": _COL_TYPES[type(f.default)]}
    return props


RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["environment", "graph", "spec"],
    "properties": {
        "environment": {
            "oneOf": [
                {"type": "object", "additionalProperties": False, "required": ["scenario"],
                 "properties": {"scenario": {"enum": [1, 2]}, "threshold": {"type": "number"}}},
                {"type": "object", "additionalProperties": False, "required": ["csv", "controls"],
                 "properties": {"csv": {"type": "string"},
                                "controls": {"type": "array", "items": {"type": "string"}, "minItems": 1}}},
            ]
        },
        "graph": {"type": "string"},
        "spec": {"type": "string"},
        "col": {"type": "object", "additionalProperties": False, "properties": _col_properties()},
        "output": {"type": "string"},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "jobs": {"type": "integer", "minimum": 1},
    },
}


@dataclasses.dataclass
class RunConfig:
    environment: dict
    graph: Path
    spec: str
    col: dict
    output: Path
    seeds: list
    jobs: int = 1

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc, base=path.parent)

    @classmethod
    def from_dict(cls, doc: dict, base=Path(".")) -> "RunConfig":
        try:
            jsonschema.validate(doc, RUN_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"{where}: {exc.message}") from None
        env = dict(doc["environment"])
        if "csv" in env:
            env["csv"] = str(base / env["csv"])
        col = dict(doc.get("col", {}))
        ColConfig(**col)  # field-level validation before any run
        parse_spec(doc["spec"])
        return cls(environment=env, graph=base / doc["graph"], spec=doc["spec"], col=col,
                   output=base / doc.get("output", "out"), seeds=list(doc.get("seeds", [0])),
                   jobs=int(doc.get("jobs", 1)))

    def digest(self) -> str:
        blob = json.dumps({"environment": self.environment, "spec": self.spec, "col": self.col,
                           "graph": self.graph.read_text(encoding="utf-8")}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _make_environment(env: dict, seed: int):
    if "scenario" in env:
        return ExampleSystem(env["scenario"], seed, threshold=env.get("threshold", 50.0))
    dataset = load_csv(env["csv"])
    return CsvReplayEnvironment(dataset, env["controls"], {c: (0.0, 1.0) for c in env["controls"]})


def _run_seed(cfg: RunConfig, seed: int, config_hash: str) -> dict:
    graph = CausalGraph.load(cfg.graph)
    spec = parse_spec(cfg.spec)
    environment = _make_environment(cfg.environment, seed)
    if isinstance(environment, CsvReplayEnvironment):
        environment.domains = control_domains(graph, environment.controls)
    trace = run_col(ColConfig(seed=seed, **cfg.col), environment, graph, spec, keep_regions=False)
    header = {"config_hash": config_hash, "seed": seed}
    trace.to_csv(cfg.output / f"trace_seed{seed}.csv", header)
    with open(cfg.output / f"region_seed{seed}.csv", "w", encoding="utf-8", newline="") as fh:
        for key, value in header.items():
            fh.write(f"# {key}={value}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*trace.controls, "mean", "variance", "kappa", "member"])
        for row in trace.region_rows():
            writer.writerow([repr(float(x)) for x in row[:-1]] + [row[-1]])
    summary = {k: (float(v) if isinstance(v, np.floating) else v) for k, v in trace.summary().items()}
    return {"seed": seed, **summary}


def _mean_std(values) -> tuple:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def cmd_run(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.seeds:
        cfg.seeds = _parse_seeds(args.seeds)
    if args.out:
        cfg.output = Path(args.out)
    if args.jobs:
        cfg.jobs = args.jobs
    try:
        CausalGraph.load(cfg.graph)
    except OSError as exc:
        raise ConfigError(f"graph: {exc}") from exc
    cfg.output.mkdir(parents=True, exist_ok=True)
    config_hash = cfg.digest()
    log.info("running %d seed(s), config %s", len(cfg.seeds), config_hash)
    if cfg.jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            per_seed = list(pool.map(_run_seed, [cfg] * len(cfg.seeds), cfg.seeds,
                                     [config_hash] * len(cfg.seeds)))
    else:
        per_seed = [_run_seed(cfg, s, config_hash) for s in cfg.seeds]
    lam_mean, lam_std = _mean_std(r["lambda_final"] for r in per_seed)
    uns_mean, uns_std = _mean_std(r["unsafe_count"] for r in per_seed)
    summary = {
        "config_hash": config_hash,
        "seeds": cfg.seeds,
        "lambda_mean": lam_mean,
        "lambda_std": lam_std,
        "unsafe_mean": uns_mean,
        "unsafe_std": uns_std,
        "runs": per_seed,
    }
    (cfg.output / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
    print(f"lambda {lam_mean:.3f} +- {lam_std:.3f}", end="")
    if uns_mean is not None:
        print(f"; unsafe interventions {uns_mean:.2f} +- {uns_std:.2f}", end="")
    print(f"  ({cfg.output / 'summary.json'})")
    return EXIT_OK


def _load_inputs(args):
    graph = CausalGraph.load(args.graph)
    dataset = load_csv(args.data)
    return graph, dataset


def cmd_validate_graph(args) -> int:
    graph, dataset = _load_inputs(args)
    checks = validate_graph(dataset, graph, max_conditioning_size=args.max_conditioning,
                            permutations=args.permutations, seed=args.seed, alpha=args.alpha)
    print(f"{'independence':<32} {'statistic':>12} {'p-value':>9}  verdict")
    for c in checks:
        verdict = "consistent" if c.consistent else "INCONSISTENT"
        print(f"{c.label:<32} {c.statistic:>12.5g} {c.p_value:>9.4f}  {verdict}")
    report = [c.to_dict() for c in checks]
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    else:
        print(json.dumps(report))
    return EXIT_OK if all(c.consistent for c in checks) else EXIT_INCONSISTENT


def cmd_estimate_prior(args) -> int:
    if args.resolution < 2:
        raise ConfigError(f"resolution: must be >= 2, got {args.resolution}")
    graph, dataset = _load_inputs(args)
    spec = parse_spec(args.spec)
    controls = tuple(args.controls.split(",")) if args.controls else graph.nodes_of_kind(VariableKind.CONTROL)
    domains = control_domains(graph, controls)
    model = estimate_prior(dataset, graph, controls, spec, axes=make_axes(domains, args.resolution),
                           bandwidth=args.bandwidth, bootstrap_reps=args.bootstrap_reps, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.to_json(out / "effect_model.json")
    member = model.initial_region(args.delta)
    with open(out / "initial_region.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*controls, "mu", "sigma", "support", "member"])
        for p, mu, sd, sup, mem in zip(model.grid, model.mu.ravel(), model.sigma.ravel(),
                                       model.support.ravel(), member.ravel()):
            writer.writerow([*(repr(float(x)) for x in p), repr(float(mu)), repr(float(sd)), int(sup), int(mem)])
    print(f"supported {model.support.mean():.3f}, initial region {member.mean():.3f}  ({out})")
    return EXIT_OK


def cmd_simulate(args) -> int:
    env = ExampleSystem(args.scenario, args.seed)
    rows = [env.observe() for _ in range(args.steps)]
    ObservationDataset.from_rows(rows).to_csv(args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def _parse_seeds(text: str) -> list:
    seeds = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safereg", description="Causal online learning of safe regions.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the learner for one or more seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", help="comma list or ranges, e.g. 0-9 or 1,4,7")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--jobs", type=int, help="parallel worker processes")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate-graph", help="test the graph's implied independencies on data")
    p.add_argument("--graph", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--max-conditioning", type=int, default=1)
    p.add_argument("--permutations", type=int, default=500)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_validate_graph)

    p = sub.add_parser("estimate-prior", help="estimate the causal prior from a passive log")
    p.add_argument("--graph", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--controls", help="comma-separated control names (default: all controls)")
    p.add_argument("--resolution", type=int, default=50)
    p.add_argument("--bandwidth", type=float, default=0.1)
    p.add_argument("--bootstrap-reps", type=int, default=50)
    p.add_argument("--delta", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_estimate_prior)

    p = sub.add_parser("simulate", help="write a passive log of the edge-server simulator")
    p.add_argument("--scenario", type=int, choices=(1, 2), default=1)
    p.add_argument("--steps", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SAFEREG_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NotIdentifiable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_IDENTIFIABLE
    except (ConfigError, GraphError, SpecError, DataError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SafeRegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("unhandled", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
