"""Release gates: one test per shipping criterion, tolerances pinned.

Each test states its budget and threshold inline; a failure here means the
build is not releasable, not that a unit regressed.  Everything is seeded,
so reruns are comparable.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import os
import time

import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import make_dataset, make_schema
from joincard.baselines import HistogramSet, estimate_independent, estimate_universal
from joincard.cli import main
from joincard.data import WorkloadQuery, parse_query
from joincard.estimators.dae import DaeConfig, DaeModel, train
from joincard.estimators.exact import ExactEmpiricalEstimator
from joincard.evaluation import plan, plan_cost, q_error, run_benchmark
from joincard.inference import InferenceConfig, estimate_cardinality
from joincard.joiner import (JoinedRelation, build_layout, fanout_name, materialize,
                             materialize_universal, sample_join, true_cardinality)
from joincard.schema import (Edge, QueryGraph, build_traversal_plan,
                             partition, select_subschemas)
from joincard.synth import ATTRIBUTES, SynthConfig, generate_dataset, generate_workload
from joincard.util import derive_seed


def passed(label: str, started: float, budget: float | None = None) -> None:
    elapsed = time.perf_counter() - started
    if budget is not None:
        assert elapsed < budget, f"{label} took {elapsed:.1f}s, budget {budget}s"
    print(f"[{label}] PASS ({elapsed:.1f}s)")


class Forum:
    """Default-scale synthetic dataset, workload, stars, and exact backends."""

    def __init__(self):
        self.config = SynthConfig()
        self.dataset, _ = generate_dataset(self.config)
        self.entries = generate_workload(self.dataset, self.config)
        self.queries = [parse_query(e, self.dataset) for e in self.entries]
        self.hypergraph = partition(self.dataset.schema)
        self.exact = {sub.key: ExactEmpiricalEstimator(materialize(self.dataset, sub))
                      for sub in self.hypergraph}

    def joins_for(self, tables) -> list[dict]:
        return [{"one": f"{e.one_table}.{e.one_column}",
                 "many": f"{e.many_table}.{e.many_column}"}
                for e in self.dataset.schema.edges
                if e.one_table in tables and e.many_table in tables]

    def random_query(self, rng, tables, pred_count: int, floor: int) -> WorkloadQuery:
        """Seeded query over ``tables`` whose true cardinality is at least ``floor``."""
        candidates = [(t, a) for t in tables for a in ATTRIBUTES[t]]
        for _ in range(200):
            picks = rng.choice(len(candidates), size=min(pred_count, len(candidates)),
                               replace=False)
            predicates = []
            for pick in picks:
                table, attr = candidates[pick]
                words = sorted(set(self.dataset.tables[table].column(attr).raw_values))
                if rng.random() < 0.5:
                    op, values = "=", [words[rng.integers(0, len(words))]]
                else:
                    k = min(int(rng.integers(2, 4)), len(words))
                    op, values = "IN", sorted(rng.choice(words, size=k, replace=False))
                predicates.append({"column": f"{table}.{attr}", "op": op,
                                   "values": list(values)})
            entry = {"tables": list(tables), "joins": self.joins_for(tables),
                     "predicates": predicates}
            query = parse_query(entry, self.dataset)
            truth = true_cardinality(self.dataset, query.graph, query.predicates)
            if truth >= floor:
                query.true_cardinality = truth
                return query
        raise AssertionError(f"no query over {tables} reached cardinality {floor}")


@pytest.fixture(scope="module")
def forum():
    return Forum()


# Gate 1: the hand-worked partition examples come out exactly.

def test_c01_partition_matches_hand_worked_stars(fig1_schema, parallel_schema):
    started = time.perf_counter()
    stars = {(sub.center, sub.vertices) for sub in partition(fig1_schema)}
    assert stars == {
        ("S", frozenset({"S", "T"})),
        ("U", frozenset({"T", "U", "V"})),
        ("W", frozenset({"T", "W"})),
    }
    doubled = partition(parallel_schema)
    assert len(doubled) == 2
    assert {sub.center for sub in doubled} == {"postlinks"}
    assert {str(e) for sub in doubled for e in sub.edge_choice} == {
        "posts.id=postlinks.post_id", "posts.id=postlinks.related_id"}
    passed("c01 partition golden", started, budget=1.0)


# Gate 2: partitioning any connected DAG schema leaves the stars connected
# through shared tables, and no table uncovered.

def random_dag_schema(seed: int):
    rng = np.random.Generator(np.random.PCG64(seed))
    n = int(rng.integers(2, 13))
    pairs = [(int(rng.integers(0, i)), i) for i in range(1, n)]
    for child in range(2, n):
        for _ in range(int(rng.integers(0, 3))):
            pairs.append((int(rng.integers(0, child)), child))
    fanin: dict[int, int] = {}
    edges = []
    for parent, child in pairs:
        slot = fanin.get(child, 0)
        fanin[child] = slot + 1
        edges.append((f"t{parent}.id", f"t{child}.fk{slot}"))
    tables = {f"t{i}": [("id", "integer")]
              + [(f"fk{k}", "integer") for k in range(fanin.get(i, 0))]
              for i in range(n)}
    return make_schema(tables, edges)


def test_c02_partition_hypergraph_is_connected_on_random_dags():
    started = time.perf_counter()
    for seed in range(100):
        schema = random_dag_schema(seed)
        subs = list(partition(schema))
        covered = frozenset().union(*(sub.vertices for sub in subs))
        assert covered == frozenset(schema.tables)
        reached = {0}
        frontier = [0]
        while frontier:
            here = frontier.pop()
            for j in range(len(subs)):
                if j not in reached and subs[here].vertices & subs[j].vertices:
                    reached.add(j)
                    frontier.append(j)
        assert len(reached) == len(subs), f"seed {seed} split the hypergraph"
    passed("c02 hypergraph connectivity 100/100", started, budget=10.0)


# Gate 3: with the exact backend, single-star estimates converge to the truth.

SINGLE_STAR_SETS = [("threads",), ("users", "threads"), ("posts",), ("users", "posts"),
                    ("topics", "posts"), ("users", "topics", "posts"),
                    ("votes",), ("users", "votes")]


def test_c03_single_star_estimates_match_oracle(forum):
    started = time.perf_counter()
    rng = np.random.Generator(np.random.PCG64(77))
    config = InferenceConfig(sample_count=100_000, seed=5)
    errors = []
    for i in range(30):
        tables = SINGLE_STAR_SETS[i % len(SINGLE_STAR_SETS)]
        query = forum.random_query(rng, tables, 1 + int(rng.integers(0, 2)), floor=20)
        assert len(select_subschemas(forum.hypergraph, query.graph)) == 1
        estimate = estimate_cardinality(query, forum.hypergraph, forum.exact,
                                        config).cardinality
        errors.append(q_error(query.true_cardinality, estimate))
    hits = sum(1 for e in errors if e <= 1.05)
    assert hits >= 28, f"only {hits}/30 within 1.05 (worst {max(errors):.4f})"
    passed(f"c03 single-star oracle {hits}/30 within 1.05", started, budget=300.0)


# Gate 4: two-star estimates stay near the truth, and removing cross-star
# conditioning demonstrably hurts on this correlated data.

TWO_STAR_SETS = [("users", "threads", "posts"), ("users", "threads", "votes"),
                 ("users", "posts", "votes"), ("users", "threads", "posts", "topics"),
                 ("users", "posts", "topics", "votes")]


def test_c04_two_star_estimates_and_conditioning_ablation(forum):
    started = time.perf_counter()
    rng = np.random.Generator(np.random.PCG64(78))
    conditioned, ablated = [], []
    for i in range(20):
        tables = TWO_STAR_SETS[i % len(TWO_STAR_SETS)]
        query = forum.random_query(rng, tables, 1 + int(rng.integers(0, 3)), floor=20)
        assert len(select_subschemas(forum.hypergraph, query.graph)) == 2
        full = estimate_cardinality(query, forum.hypergraph, forum.exact,
                                    InferenceConfig(sample_count=50_000, seed=6))
        bare = estimate_cardinality(query, forum.hypergraph, forum.exact,
                                    InferenceConfig(sample_count=50_000, seed=6,
                                                    conditioning=False))
        conditioned.append(q_error(query.true_cardinality, full.cardinality))
        ablated.append(q_error(query.true_cardinality, bare.cardinality))
    assert np.median(conditioned) <= 1.5, f"median {np.median(conditioned):.3f}"
    assert np.median(ablated) > np.median(conditioned), (
        f"ablation did not hurt: {np.median(ablated):.3f} vs "
        f"{np.median(conditioned):.3f}")
    passed(f"c04 two-star median {np.median(conditioned):.3f} "
           f"(ablated {np.median(ablated):.3f})", started)


# Gate 5: the trained models, not just the exact backend, carry the workload.

def test_c05_trained_models_hit_workload_targets(forum):
    started = time.perf_counter()
    estimators = {}
    for sub in forum.hypergraph:
        layout = build_layout(forum.dataset, sub)
        sample = sample_join(forum.dataset, sub, 10_000,
                             derive_seed(0, f"sample:{sub.key}"), layout)
        model = DaeModel(layout, DaeConfig(), derive_seed(0, f"init:{sub.key}"),
                         join_row_count=sample.join_row_count)
        train(model, sample.codes, derive_seed(0, f"train:{sub.key}"))
        estimators[sub.key] = model
    training_time = time.perf_counter() - started
    assert training_time < 900, f"training took {training_time:.0f}s"

    config = InferenceConfig(sample_count=8000, seed=derive_seed(0, "estimate"))
    errors = []
    for query in forum.queries:
        estimate = estimate_cardinality(query, forum.hypergraph, estimators,
                                        config).cardinality
        errors.append(q_error(query.true_cardinality, estimate))
    median, p95 = np.median(errors), np.percentile(errors, 95)
    assert median <= 3.0, f"median q-error {median:.2f}"
    assert p95 <= 20.0, f"95th percentile q-error {p95:.2f}"
    passed(f"c05 trained models q50={median:.2f} q95={p95:.2f}", started)


# Gate 6: analytic gradients agree with central differences everywhere.

def test_c06_gradients_match_central_differences():
    started = time.perf_counter()
    schema = make_schema(
        {"S": [("id", "integer"), ("x", "categorical")],
         "T": [("t_id", "integer"), ("y", "categorical")]},
        [("S.id", "T.t_id")])
    dataset = make_dataset(schema, {
        "S": {"id": ["1", "2", "3", "4", "5", "6"],
              "x": ["a", "a", "b", "b", "c", "d"]},
        "T": {"t_id": ["1", "1", "2", "3", "5", "6", "7"],
              "y": ["p", "p", "q", "q", "r", "s", "t"]},
    })
    sub = next(iter(partition(schema)))
    relation = materialize(dataset, sub)
    config = DaeConfig(hidden=(8,), one_hot_max=3, dtype="float64", batch_size=4)
    model = DaeModel(relation.layout, config, seed=1,
                     join_row_count=relation.row_count)
    batch = relation.codes[:6]
    mask = np.zeros((6, len(relation.layout.attributes)), dtype=bool)
    for j in range(mask.shape[1]):
        mask[j % 6, j] = True
        mask[(j + 3) % 6, j] = True
    _, grads = model.loss_and_grads(batch, mask)

    eps = 1e-5
    worst = 0.0
    for name, value in model.params.items():
        analytic = grads.get(name, np.zeros_like(value))
        flat = value.reshape(-1)
        for k in range(flat.size):
            keep = flat[k]
            flat[k] = keep + eps
            hi, _ = model.loss_and_grads(batch, mask)
            flat[k] = keep - eps
            lo, _ = model.loss_and_grads(batch, mask)
            flat[k] = keep
            numeric = (hi - lo) / (2 * eps)
            a = analytic.reshape(-1)[k]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
            assert err <= 1e-4, f"{name}[{k}]: analytic {a}, numeric {numeric}"
    passed(f"c06 gradient check worst={worst:.2e}", started, budget=10.0)


# Gate 7: join sampling is uniform over the materialized join.

def test_c07_sampling_matches_materialized_join(forum):
    started = time.perf_counter()
    sub = next(s for s in forum.hypergraph if s.center == "posts")
    layout = build_layout(forum.dataset, sub)
    relation = materialize(forum.dataset, sub, layout=layout)
    assert relation.row_count <= 10_000
    n = 1_000_000
    sample = sample_join(forum.dataset, sub, n, seed=99, layout=layout)
    stacked = np.vstack([relation.codes, sample.codes])
    _, inverse = np.unique(stacked, axis=0, return_inverse=True)
    expected = np.bincount(inverse[:relation.row_count]).astype(float)
    observed = np.bincount(inverse[relation.row_count:],
                           minlength=len(expected)).astype(float)
    assert observed[expected == 0].sum() == 0, "sampled a row outside the join"
    expected *= n / relation.row_count
    _, p = chisquare(observed[expected > 0], expected[expected > 0])
    assert p > 0.001, f"uniformity rejected at p={p:.2e}"
    passed(f"c07 sampling fidelity p={p:.3f}", started, budget=60.0)


# Gate 8: metric definitions and the planner's optimality.

def exhaustive_best_cost(query: WorkloadQuery, card) -> float:
    pairs = [(e.one_table, e.many_table) for e in query.graph.edges]

    def connected(tables: frozenset) -> bool:
        seen = {next(iter(tables))}
        grew = True
        while grew:
            grew = False
            for a, b in pairs:
                if a in seen and b in tables and b not in seen:
                    seen.add(b); grew = True
                if b in seen and a in tables and a not in seen:
                    seen.add(a); grew = True
        return len(seen) == len(tables)

    @functools.lru_cache(maxsize=None)
    def best(tables: frozenset) -> float:
        if len(tables) == 1:
            return 0.0
        names = sorted(tables)
        options = []
        for pick in range(1, 1 << (len(names) - 1)):
            left = frozenset(n for i, n in enumerate(names) if pick >> i & 1)
            right = tables - left
            if not connected(left) or not connected(right):
                continue
            if not any((a in left and b in right) or (a in right and b in left)
                       for a, b in pairs):
                continue
            options.append(best(left) + best(right))
        return card(tables) + min(options)

    return best(frozenset(query.graph.vertices))


def shaped_query(shape: str, n: int) -> WorkloadQuery:
    names = [f"t{i}" for i in range(n)]
    if shape == "chain":
        raw = [(names[i], names[i + 1]) for i in range(n - 1)]
    elif shape == "star":
        raw = [(names[0], names[i]) for i in range(1, n)]
    else:
        raw = [(names[i // 2], names[i + 1]) for i in range(n - 1)]
    edges = tuple(Edge.parse(f"{a}.id", f"{b}.{a}_fk") for a, b in raw)
    return WorkloadQuery(QueryGraph(frozenset(names), edges), {}, None, {})


def test_c08_metrics_and_planner_optimality(forum):
    started = time.perf_counter()
    assert q_error(100, 100) == 1.0
    assert q_error(10, 40) == 4.0
    assert q_error(40, 10) == 4.0
    assert q_error(0, 5) == 5.0
    assert q_error(5, 0) == 5.0

    for shape in ("chain", "star", "tree"):
        for n in range(2, 7):
            for seed in range(3):
                query = shaped_query(shape, n)
                rng = np.random.Generator(np.random.PCG64(seed * 100 + n))
                table = {}

                def card(tables, table=table, rng=rng):
                    key = frozenset(tables)
                    if key not in table:
                        table[key] = float(rng.integers(1, 1000))
                    return table[key]

                cost = plan_cost(plan(query, card), card)
                assert cost == exhaustive_best_cost(query, card), (
                    f"{shape} n={n} seed={seed}")

    histograms = HistogramSet(forum.dataset)
    universal = ExactEmpiricalEstimator(materialize_universal(forum.dataset))
    methods = {
        "oracle": lambda q: float(true_cardinality(forum.dataset, q.graph,
                                                   q.predicates)),
        "estimator": lambda q: estimate_cardinality(
            q, forum.hypergraph, forum.exact,
            InferenceConfig(sample_count=2000, seed=21)).cardinality,
        "independent": lambda q: estimate_independent(forum.dataset, q, histograms),
        "universal": lambda q: estimate_universal(
            forum.dataset, universal, q, InferenceConfig(sample_count=1000, seed=22)),
    }
    from joincard.data import Workload
    rows, _ = run_benchmark(forum.dataset, Workload(forum.queries), methods)
    assert all(row.error is None for row in rows)
    assert all(row.p_error >= 1.0 for row in rows)
    oracle_rows = [row for row in rows if row.method == "oracle"]
    assert len(oracle_rows) == len(forum.queries)
    assert all(row.p_error == 1.0 and row.q_error == 1.0 for row in oracle_rows)
    passed("c08 metrics and planner", started, budget=60.0)


# Gate 9: inference multiplies crossing fanouts and never touches a fanout
# internal to a star (there is none to touch, and none is requested).

class RecordingEstimator:
    def __init__(self, inner):
        self.inner = inner
        self.layout = inner.layout
        self.join_row_count = inner.join_row_count
        self.requested: list[str] = []

    def conditional_distribution(self, inputs, target):
        return self.inner.conditional_distribution(inputs, target)

    def session(self, sample_count):
        real = self.inner.session(sample_count)
        outer = self

        class _Session:
            def distributions(self, target):
                outer.requested.append(target)
                return real.distributions(target)

            def assign(self, target, values):
                real.assign(target, values)

        return _Session()


def scaled_fanout_copy(estimator, attr: str, factor: int):
    specs = []
    for spec in estimator.layout.attributes:
        if spec.name == attr:
            scaled = tuple(v * factor for v in spec.fanout_values)
            specs.append(dataclasses.replace(spec, fanout_values=scaled))
        else:
            specs.append(spec)
    layout = type(estimator.layout)(estimator.layout.member_tables, tuple(specs))
    relation = JoinedRelation(layout, estimator.codes, len(estimator.codes))
    return ExactEmpiricalEstimator(relation, estimator.join_row_count)


def test_c09_no_internal_fanout_is_used_and_crossing_ones_multiply(forum):
    started = time.perf_counter()
    for sub in forum.hypergraph:
        layout_fanouts = {spec.name for spec in forum.exact[sub.key].layout.attributes
                          if spec.role == "fanout"}
        internal = {fanout_name(e) for e in sub.edge_choice}
        assert not layout_fanouts & internal
        assert layout_fanouts == {fanout_name(e) for e in sub.external_fanout_edges}

    rng = np.random.Generator(np.random.PCG64(41))
    query = forum.random_query(rng, ("users", "threads", "posts"), 2, floor=20)
    wrapped = {key: RecordingEstimator(est) for key, est in forum.exact.items()}
    config = InferenceConfig(sample_count=3000, seed=9)
    baseline = estimate_cardinality(query, forum.hypergraph, wrapped, config)

    selected = select_subschemas(forum.hypergraph, query.graph)
    traversal = build_traversal_plan(forum.dataset.schema, selected, query.graph, None)
    for step in traversal.steps:
        recorder = wrapped[step.subschema.key]
        asked = {t for t in recorder.requested if t.startswith("fanout::")}
        assert asked == {fanout_name(e) for e in step.fanout_edges}

    root_key = traversal.steps[0].subschema.key
    crossing = next(iter({t for t in wrapped[root_key].requested
                          if t.startswith("fanout::")}))
    for factor in (3, 7):
        patched = dict(forum.exact)
        patched[root_key] = scaled_fanout_copy(forum.exact[root_key], crossing, factor)
        scaled = estimate_cardinality(query, forum.hypergraph, patched, config)
        ratio = scaled.cardinality / baseline.cardinality
        assert ratio == pytest.approx(factor, rel=1e-9)
    passed("c09 fanout usage structural check", started)


# Gate 10: the command pipeline is bit-reproducible, in and out of process pools.

def run_cli_pipeline(root, workers: int = 1) -> tuple[dict[str, bytes], bytes]:
    out = root / "synth"
    assert main(["synth", "--out", str(out), "--users", "40", "--topics", "8",
                 "--threads", "60", "--posts", "80", "--votes", "60",
                 "--seed", "7", "--width-mix", "1:1,2:2,3:2"]) == 0
    config_path = root / "run.json"
    config_path.write_text(json.dumps({
        "schema": str(out / "schema.json"),
        "data_dir": str(out / "data"),
        "model_dir": str(root / "models"),
        "backend": "dae",
        "train_samples": 800,
        "inference_samples": 400,
        "seed": 3,
        "dae": {"hidden": [32, 32], "steps": 150, "batch_size": 128},
    }))
    assert main(["train", "--config", str(config_path),
                 "--workers", str(workers)]) == 0
    results = root / "results.jsonl"
    assert main(["evaluate", "--config", str(config_path),
                 "--methods", "estimator,independent,universal",
                 "--out", str(results), str(out / "workload.json")]) == 0
    models = {}
    for name in sorted(os.listdir(root / "models")):
        models[name] = (root / "models" / name).read_bytes()
    return models, results.read_bytes()


def test_c10_pipeline_reruns_are_byte_identical(tmp_path):
    started = time.perf_counter()
    models_a, results_a = run_cli_pipeline(tmp_path / "a")
    models_b, results_b = run_cli_pipeline(tmp_path / "b")
    assert models_a == models_b
    assert results_a == results_b
    models_c, _ = run_cli_pipeline(tmp_path / "c", workers=2)
    assert models_c == models_a
    passed("c10 pipeline reproducibility", started)
