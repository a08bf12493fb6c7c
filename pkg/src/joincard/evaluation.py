"""Estimator quality metrics, a join-order planner, and benchmark orchestration.

Estimates are scored two ways.  q_error is the multiplicative distance
between estimate and truth.  p_error asks whether the estimate would have
misled a query planner: a dynamic program finds the cheapest join tree under
the estimated cardinalities and under the true ones, both plans are costed
with true cardinalities, and the ratio is reported.  The cost model is the
sum of intermediate result sizes, under which planning with true
cardinalities is optimal by construction, so the ratio is always >= 1.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from .data import Dataset, Workload, WorkloadQuery
from .joiner import true_cardinality
from .schema import QueryGraph

PERCENTILES = (50.0, 90.0, 95.0, 99.0, 100.0)


class PlanError(RuntimeError):
    """Raised when a cardinality source fails on a subquery the planner needs."""


def q_error(truth: float, estimate: float) -> float:
    """Multiplicative estimation error, symmetric, >= 1; operands clamp to >= 1."""
    a = max(float(truth), 1.0)
    b = max(float(estimate), 1.0)
    return max(a, b) / min(a, b)


def summarize(values: list[float]) -> dict[str, float]:
    """Median through max percentiles of a metric vector."""
    if not values:
        return {}
    arr = np.asarray(values, dtype=np.float64)
    out = {}
    for pct in PERCENTILES:
        key = "max" if pct == 100.0 else f"p{int(pct)}"
        out[key] = float(np.percentile(arr, pct))
    return out


@dataclass(frozen=True)
class PlanNode:
    """A join tree: a leaf per table or a binary join of two subplans."""

    vertices: frozenset[str]
    cardinality: float
    left: "PlanNode | None" = None
    right: "PlanNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def describe(self) -> str:
        if self.is_leaf:
            return next(iter(self.vertices))
        return f"({self.left.describe()} JOIN {self.right.describe()})"


class SubqueryCardinalities:
    """Caches a per-vertex-set cardinality callable; names the subquery on failure."""

    def __init__(self, fn):
        self.fn = fn
        self.cache: dict[frozenset, float] = {}

    def __call__(self, vertices: frozenset) -> float:
        if vertices not in self.cache:
            try:
                self.cache[vertices] = float(self.fn(vertices))
            except Exception as exc:
                raise PlanError(
                    f"cardinality source failed on subquery {sorted(vertices)}: {exc}"
                ) from exc
        return self.cache[vertices]


def induced_subquery(query: WorkloadQuery, tables: frozenset) -> WorkloadQuery:
    """The query restricted to a connected subset of its tables."""
    edges = tuple(e for e in query.graph.edges
                  if e.one_table in tables and e.many_table in tables)
    preds = {a: p for a, p in query.predicates.items() if a.split(".", 1)[0] in tables}
    return WorkloadQuery(QueryGraph(frozenset(tables), edges), preds, None, {})


def oracle_source(dataset: Dataset, query: WorkloadQuery) -> SubqueryCardinalities:
    """True cardinalities of the query's connected subqueries."""
    def fn(vertices: frozenset) -> float:
        sub = induced_subquery(query, vertices)
        return float(true_cardinality(dataset, sub.graph, sub.predicates))
    return SubqueryCardinalities(fn)


def estimate_source(query: WorkloadQuery, estimate_fn) -> SubqueryCardinalities:
    """Estimated cardinalities of the query's connected subqueries."""
    def fn(vertices: frozenset) -> float:
        return float(estimate_fn(induced_subquery(query, vertices)))
    return SubqueryCardinalities(fn)


def plan(query: WorkloadQuery, card) -> PlanNode:
    """Cheapest join tree under ``card`` by DP over connected vertex subsets.

    Considers every split of a connected subset into two connected, joined
    halves (covers bushy and left-deep shapes); the cost of a plan is the sum
    of its join-node cardinalities.  Ties break on the lexicographically
    smallest (left names, right names) split.
    """
    verts = sorted(query.graph.vertices)
    if len(verts) == 1:
        return PlanNode(frozenset(verts), card(frozenset(verts)))
    index = {v: i for i, v in enumerate(verts)}
    n = len(verts)
    edge_bits = [(1 << index[e.one_table], 1 << index[e.many_table])
                 for e in query.graph.edges]
    neighbor = [0] * n
    for a, b in edge_bits:
        neighbor[a.bit_length() - 1] |= b
        neighbor[b.bit_length() - 1] |= a

    def connected(mask: int) -> bool:
        seed = mask & -mask
        frontier, seen = seed, seed
        while frontier:
            nxt = 0
            m = frontier
            while m:
                bit = m & -m
                m ^= bit
                nxt |= neighbor[bit.bit_length() - 1]
            frontier = nxt & mask & ~seen
            seen |= frontier
        return seen == mask

    def names(mask: int) -> tuple[str, ...]:
        return tuple(verts[i] for i in range(n) if mask >> i & 1)

    full = (1 << n) - 1
    best: dict[int, tuple[float, PlanNode]] = {}
    for i, v in enumerate(verts):
        best[1 << i] = (0.0, PlanNode(frozenset((v,)), card(frozenset((v,)))))
    masks = [m for m in range(1, full + 1)
             if m.bit_count() >= 2 and connected(m)]
    masks.sort(key=lambda m: m.bit_count())
    for mask in masks:
        rows = card(frozenset(names(mask)))
        candidates = []
        a = (mask - 1) & mask
        while a:
            b = mask ^ a
            if a < b and a in best and b in best and any(
                    (a & x and b & y) or (a & y and b & x) for x, y in edge_bits):
                cost = best[a][0] + best[b][0] + rows
                candidates.append((cost, names(a), names(b), a, b))
            a = (a - 1) & mask
        if not candidates:
            raise PlanError(f"query graph is disconnected over {names(mask)}")
        cost, _, _, a, b = min(candidates, key=lambda c: (c[0], c[1], c[2]))
        best[mask] = (cost, PlanNode(frozenset(names(mask)), rows,
                                     best[a][1], best[b][1]))
    return best[full][1]


def plan_cost(node: PlanNode, card) -> float:
    """Sum of join-node cardinalities under ``card`` (leaves are free)."""
    if node.is_leaf:
        return 0.0
    return (card(node.vertices) + plan_cost(node.left, card)
            + plan_cost(node.right, card))


def p_error(query: WorkloadQuery, estimated: SubqueryCardinalities,
            oracle: SubqueryCardinalities) -> float:
    """Cost paid for planning with estimates, relative to planning with truth.

    Both plans are costed under true cardinalities; single-table queries have
    nothing to plan and score 1.
    """
    if len(query.graph.vertices) < 2:
        return 1.0
    chosen = plan(query, estimated)
    reference = plan(query, oracle)
    denom = plan_cost(reference, oracle)
    numer = plan_cost(chosen, oracle)
    if denom <= 0:
        return 1.0
    return max(numer / denom, 1.0)


@dataclass
class MetricRow:
    query_index: int
    method: str
    true_cardinality: float
    estimate: float | None
    q_error: float | None
    p_error: float | None
    seconds: float
    error: str | None = None


def run_benchmark(dataset: Dataset, workload: Workload, methods: dict,
                  plan_metrics: bool = True) -> tuple[list[MetricRow], dict]:
    """Score every method on every query; failures are recorded, not raised.

    ``methods`` maps a name to a callable from WorkloadQuery to the estimated
    cardinality.  The same callable prices the planner's subqueries when
    plan_metrics is on.
    """
    rows: list[MetricRow] = []
    for qi, query in enumerate(workload.queries):
        truth = query.true_cardinality
        if truth is None:
            truth = true_cardinality(dataset, query.graph, query.predicates)
        oracle = oracle_source(dataset, query) if plan_metrics else None
        for name in sorted(methods):
            fn = methods[name]
            start = time.perf_counter()
            try:
                estimate = float(fn(query))
                perr = None
                if plan_metrics:
                    source = estimate_source(query, fn)
                    source.cache[frozenset(query.graph.vertices)] = estimate
                    perr = p_error(query, source, oracle)
                elapsed = time.perf_counter() - start
                rows.append(MetricRow(qi, name, float(truth), estimate,
                                      q_error(truth, estimate), perr, elapsed))
            except Exception as exc:
                elapsed = time.perf_counter() - start
                rows.append(MetricRow(qi, name, float(truth), None, None, None,
                                      elapsed, error=str(exc)))
    return rows, summarize_rows(rows)


def summarize_rows(rows: list[MetricRow]) -> dict:
    """Per-method percentile summaries plus mean response time."""
    summary: dict[str, dict] = {}
    for method in sorted({r.method for r in rows}):
        mine = [r for r in rows if r.method == method]
        entry = {
            "queries": len(mine),
            "failures": sum(1 for r in mine if r.error is not None),
            "q_error": summarize([r.q_error for r in mine if r.q_error is not None]),
            "p_error": summarize([r.p_error for r in mine if r.p_error is not None]),
            "mean_seconds": (sum(r.seconds for r in mine) / len(mine)) if mine else 0.0,
        }
        summary[method] = entry
    return summary


def write_results(rows: list[MetricRow], summary: dict, path: str) -> None:
    """Results file: one JSON line per row, then one summary line.

    Timing is reported on stdout only; the file must be byte-identical across
    re-runs with the same seeds.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            record = {
                "query": row.query_index,
                "method": row.method,
                "true_cardinality": row.true_cardinality,
                "estimate": row.estimate,
                "q_error": row.q_error,
                "p_error": row.p_error,
            }
            if row.error is not None:
                record["error"] = row.error
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        file_summary = {
            method: {k: v for k, v in entry.items() if k != "mean_seconds"}
            for method, entry in summary.items()
        }
        fh.write(json.dumps({"summary": file_summary}, sort_keys=True) + "\n")


def format_table(summary: dict) -> str:
    """Text table mirroring the percentile columns of the results summary."""
    headers = ["method", "q50", "q90", "q95", "q99", "qmax",
               "p50", "p95", "pmax", "ms", "fail"]
    lines = ["  ".join(f"{h:>8}" for h in headers)]
    for method in sorted(summary):
        entry = summary[method]
        q = entry.get("q_error", {})
        p = entry.get("p_error", {})
        cells = [f"{method:>8}"]
        for source, keys in ((q, ("p50", "p90", "p95", "p99", "max")),
                             (p, ("p50", "p95", "max"))):
            for key in keys:
                value = source.get(key)
                cells.append(f"{value:8.2f}" if value is not None else f"{'-':>8}")
        cells.append(f"{entry.get('mean_seconds', 0.0) * 1e3:8.1f}")
        cells.append(f"{entry.get('failures', 0):8d}")
        lines.append("  ".join(cells))
    return "\n".join(lines)
