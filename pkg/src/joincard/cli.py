"""Command-line pipeline: synth, partition, join-sample, train, estimate, evaluate.

Every command takes an optional JSON config file plus flags; flags win.  All
outputs are deterministic for a fixed config, so re-running a command must
reproduce its files byte for byte.  Exit codes: 0 success, 2 configuration or
usage error, 3 runtime failure (e.g. diverged training).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import os
import sys
import time

from . import baselines, data, evaluation, joiner, synth
from .data import IngestError, load_dataset, parse_workload
from .estimators import (DaeConfig, DaeModel, ExactEmpiricalEstimator,
                         TrainingDiverged, load_model, save_model, train)
from .inference import InferenceConfig, estimate_cardinality
from .schema import SchemaError, check_connected, load_schema_config, partition
from .util import derive_seed, single_thread_blas


class UsageError(ValueError):
    """Configuration or argument problems; mapped to exit code 2."""


@dataclasses.dataclass
class RunConfig:
    schema: str = "schema.json"
    data_dir: str = "data"
    model_dir: str = "models"
    results: str = "results.jsonl"
    backend: str = "exact"           # exact | dae
    train_samples: int = 10_000
    inference_samples: int = 2_000
    seed: int = 0
    workers: int = 1
    materialize_threshold: int = 5_000_000
    joint_expectation: bool = True
    conditioning: bool = True
    independent_baseline: bool = False
    universal_baseline: bool = False
    histogram_buckets: int = 100
    dae: dict = dataclasses.field(default_factory=dict)


CONFIG_FLAGS = [f.name for f in dataclasses.fields(RunConfig) if f.name != "dae"]


def load_run_config(path: str | None) -> RunConfig:
    config = RunConfig()
    if path is None:
        return config
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key, value in raw.items():
        if key not in known:
            raise UsageError(f"unknown config key {key!r}")
        setattr(config, key, value)
    return config


def apply_flags(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    for name in CONFIG_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            setattr(config, name, value)
    return config


def dae_config_from(config: RunConfig) -> DaeConfig:
    known = {f.name for f in dataclasses.fields(DaeConfig)}
    overrides = dict(config.dae)
    unknown = set(overrides) - known
    if unknown:
        raise UsageError(f"unknown dae config keys: {sorted(unknown)}")
    if "hidden" in overrides:
        overrides["hidden"] = tuple(overrides["hidden"])
    return DaeConfig(**overrides)


def _load_inputs(config: RunConfig):
    schema = load_schema_config(config.schema)
    dataset = load_dataset(schema, config.data_dir)
    return schema, dataset


def cmd_partition(args: argparse.Namespace) -> int:
    config = apply_flags(load_run_config(args.config), args)
    schema = load_schema_config(config.schema)
    subschemas = partition(schema)
    for sub in subschemas:
        print(f"subschema {sub.key}")
        print(f"  center:  {sub.center}")
        print(f"  tables:  {', '.join(sorted(sub.vertices))}")
        edges = ", ".join(str(e) for e in sub.edge_choice) or "(none)"
        print(f"  edges:   {edges}")
        fanouts = ", ".join(str(e) for e in sub.external_fanout_edges) or "(none)"
        print(f"  fanouts: {fanouts}")
    verdict = "connected" if check_connected(subschemas) else "disconnected"
    print(f"{len(subschemas)} subschemas, hypergraph {verdict}")
    return 0


def cmd_join_sample(args: argparse.Namespace) -> int:
    config = apply_flags(load_run_config(args.config), args)
    schema, dataset = _load_inputs(config)
    os.makedirs(args.out, exist_ok=True)
    for sub in partition(schema):
        seed = derive_seed(config.seed, f"sample:{sub.key}")
        sample = joiner.sample_join(dataset, sub, args.samples, seed)
        path = os.path.join(args.out, f"{sub.key}.cinj")
        joiner.save_sample(sample, path)
        print(f"wrote {path} ({sample.sample_count} rows, join size {sample.join_row_count})")
    return 0


def _train_one(schema_path: str, data_dir: str, model_dir: str, key: str,
               train_samples: int, seed: int, dae_overrides: dict) -> tuple[str, float, float]:
    """Train one subschema's model; runs in a worker process."""
    schema = load_schema_config(schema_path)
    dataset = load_dataset(schema, data_dir)
    sub = next(s for s in partition(schema) if s.key == key)
    layout = joiner.build_layout(dataset, sub)
    sample = joiner.sample_join(dataset, sub, train_samples,
                                derive_seed(seed, f"sample:{key}"), layout)
    config = DaeConfig(**dae_overrides)
    model = DaeModel(layout, config, derive_seed(seed, f"init:{key}"),
                     join_row_count=sample.join_row_count)
    start = time.perf_counter()
    with single_thread_blas():
        losses = train(model, sample.codes, derive_seed(seed, f"train:{key}"))
    elapsed = time.perf_counter() - start
    save_model(model, os.path.join(model_dir, f"{key}.cinm"), key)
    return key, elapsed, float(losses[-1]) if len(losses) else float("nan")


def cmd_train(args: argparse.Namespace) -> int:
    config = apply_flags(load_run_config(args.config), args)
    schema, _ = _load_inputs(config)  # fail early on bad inputs
    dae_overrides = dataclasses.asdict(dae_config_from(config))
    dae_overrides["hidden"] = tuple(dae_overrides["hidden"])
    os.makedirs(config.model_dir, exist_ok=True)
    jobs = [(config.schema, config.data_dir, config.model_dir, sub.key,
             config.train_samples, config.seed, dae_overrides)
            for sub in partition(schema)]
    if config.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_train_one, *zip(*jobs)))
    else:
        results = [_train_one(*job) for job in jobs]
    for key, elapsed, loss in results:
        print(f"trained {key}: {elapsed:.1f}s, final loss {loss:.4f}")
    return 0


def _build_engine(config: RunConfig, schema, dataset):
    """The traversal engine closed over per-subschema estimators."""
    hypergraph = partition(schema)
    estimators = {}
    for sub in hypergraph:
        layout = joiner.build_layout(dataset, sub)
        if config.backend == "exact":
            relation = joiner.materialize(dataset, sub, config.materialize_threshold,
                                          layout)
            estimators[sub.key] = ExactEmpiricalEstimator(relation)
        elif config.backend == "dae":
            path = os.path.join(config.model_dir, f"{sub.key}.cinm")
            if not os.path.exists(path):
                raise UsageError(f"no model file for subschema {sub.key}: {path} "
                                 "(run the train command first)")
            estimators[sub.key] = load_model(path, layout)
        else:
            raise UsageError(f"unknown backend {config.backend!r}")
    inf_config = InferenceConfig(
        sample_count=config.inference_samples,
        seed=derive_seed(config.seed, "estimate"),
        joint_expectation=config.joint_expectation,
        conditioning=config.conditioning,
    )

    def engine(query) -> float:
        return estimate_cardinality(query, hypergraph, estimators, inf_config).cardinality

    return engine


def _build_methods(config: RunConfig, schema, dataset, names: list[str]) -> dict:
    methods = {}
    for name in names:
        if name == "estimator":
            methods[name] = _build_engine(config, schema, dataset)
        elif name == "independent":
            histograms = baselines.HistogramSet(dataset, config.histogram_buckets)
            methods[name] = (lambda h: lambda q: baselines.estimate_independent(
                dataset, q, h))(histograms)
        elif name == "universal":
            relation = joiner.materialize_universal(dataset, config.materialize_threshold)
            ur = ExactEmpiricalEstimator(relation)
            inf_config = InferenceConfig(sample_count=config.inference_samples,
                                         seed=derive_seed(config.seed, "universal"))
            methods[name] = lambda q: baselines.estimate_universal(dataset, ur, q,
                                                                   inf_config)
        else:
            raise UsageError(f"unknown method {name!r} "
                             "(expected estimator, independent, universal)")
    return methods


def _method_names(config: RunConfig, args: argparse.Namespace) -> list[str]:
    if getattr(args, "methods", None):
        return [m.strip() for m in args.methods.split(",") if m.strip()]
    names = ["estimator"]
    if config.independent_baseline:
        names.append("independent")
    if config.universal_baseline:
        names.append("universal")
    return names


def cmd_estimate(args: argparse.Namespace) -> int:
    config = apply_flags(load_run_config(args.config), args)
    schema, dataset = _load_inputs(config)
    workload = parse_workload(args.workload, dataset)
    engine = _build_engine(config, schema, dataset)
    out = args.out or config.results
    with open(out, "w", encoding="utf-8") as fh:
        for qi, query in enumerate(workload.queries):
            record = {"query": qi, "backend": config.backend}
            try:
                record["estimate"] = engine(query)
            except Exception as exc:  # recorded per query, run continues
                record["error"] = str(exc)
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    print(f"wrote {out} ({len(workload.queries)} queries)")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = apply_flags(load_run_config(args.config), args)
    schema, dataset = _load_inputs(config)
    workload = parse_workload(args.workload, dataset)
    methods = _build_methods(config, schema, dataset, _method_names(config, args))
    rows, summary = evaluation.run_benchmark(dataset, workload, methods,
                                             plan_metrics=not args.skip_p_error)
    out = args.out or config.results
    evaluation.write_results(rows, summary, out)
    print(evaluation.format_table(summary))
    print(f"wrote {out}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    fields = {f.name for f in dataclasses.fields(synth.SynthConfig)}
    overrides = {name: getattr(args, name) for name in fields
                 if getattr(args, name, None) is not None}
    if args.width_mix is not None:
        try:
            overrides["width_mix"] = tuple(
                (int(w), int(c)) for w, c in
                (part.split(":") for part in args.width_mix.split(",")))
        except ValueError as exc:
            raise UsageError(f"bad --width-mix (want '1:8,2:14,...'): {exc}") from exc
        overrides["workload_size"] = sum(c for _, c in overrides["width_mix"])
    config = synth.SynthConfig(**overrides)
    paths = synth.synthesize(config, args.out)
    for kind in sorted(paths):
        print(f"{kind}: {paths[kind]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="joincard",
        description="Join-cardinality estimation over star subschemas.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, *extra):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--schema", help="schema config path")
        p.add_argument("--seed", type=int)
        for name in extra:
            flag = "--" + name.replace("_", "-")
            if name in ("backend",):
                p.add_argument(flag, choices=["exact", "dae"])
            elif name in ("joint_expectation", "conditioning"):
                p.add_argument(flag, type=lambda v: v.lower() in ("1", "true", "yes"))
            elif name in ("data_dir", "model_dir", "results"):
                p.add_argument(flag)
            else:
                p.add_argument(flag, type=int)

    p = sub.add_parser("partition", help="print the star subschemas of a schema")
    add_common(p)
    p.set_defaults(fn=cmd_partition)

    p = sub.add_parser("join-sample", help="draw and store uniform join samples")
    add_common(p, "data_dir")
    p.add_argument("--out", required=True, help="output directory for .cinj files")
    p.add_argument("--samples", type=int, default=10_000)
    p.set_defaults(fn=cmd_join_sample)

    p = sub.add_parser("train", help="train one model per subschema")
    add_common(p, "data_dir", "model_dir", "train_samples", "workers")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("estimate", help="estimate cardinalities for a workload")
    add_common(p, "data_dir", "model_dir", "backend", "inference_samples",
               "materialize_threshold", "joint_expectation", "conditioning")
    p.add_argument("workload", help="workload JSON file")
    p.add_argument("--out", help="output JSONL path")
    p.set_defaults(fn=cmd_estimate)

    p = sub.add_parser("evaluate", help="score estimators against true cardinalities")
    add_common(p, "data_dir", "model_dir", "backend", "inference_samples",
               "materialize_threshold", "joint_expectation", "conditioning",
               "histogram_buckets")
    p.add_argument("workload", help="workload JSON file")
    p.add_argument("--out", help="results JSONL path")
    p.add_argument("--methods", help="comma list: estimator,independent,universal")
    p.add_argument("--skip-p-error", action="store_true")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("synth", help="generate the synthetic dataset and workload")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    for name in ("users", "topics", "threads", "posts", "votes",
                 "latent_count", "workload_size"):
        p.add_argument("--" + name.replace("_", "-"), type=int)
    for name in ("correlation", "cross_correlation", "dangling",
                 "null_keys", "null_cells"):
        p.add_argument("--" + name.replace("_", "-"), type=float)
    p.add_argument("--width-mix", help="per-width query counts, e.g. '1:8,2:14'")
    p.set_defaults(fn=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, SchemaError, IngestError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # systemic runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
