"""Reference estimators the traversal engine is compared against.

Two baselines with opposite failure modes.  The independence baseline
multiplies per-table row counts, per-predicate histogram selectivities, and a
distinct-count factor per join, ignoring all correlation.  The universal
baseline runs the sampling machinery over the full outer join of the whole
schema (trees only): predicates and presence flags accumulate a per-sample
probability, and each sampled fanout on an edge pointing away from the query
divides the sample, compensating for rows multiplied by tables the query
never asked for.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, PredicateRange, WorkloadQuery
from .inference import InferenceConfig, _draw, evaluate_predicate_range
from .joiner import FLAG_TRUE, fanout_name, flag_name
from .schema import Edge, SchemaError


@dataclass
class Histogram:
    """Equi-depth buckets over one column's non-null dictionary codes."""

    lo: np.ndarray      # inclusive code bounds per bucket
    hi: np.ndarray
    counts: np.ndarray
    row_count: int      # includes NULL rows

    def selectivity(self, pred: PredicateRange) -> float:
        """Admitted row fraction, codes spread uniformly inside each bucket."""
        if self.row_count == 0 or len(self.counts) == 0:
            return 0.0
        admitted = np.asarray(pred.codes, dtype=np.int64)
        left = np.searchsorted(admitted, self.lo, side="left")
        right = np.searchsorted(admitted, self.hi, side="right")
        inside = (right - left).astype(np.float64)
        width = (self.hi - self.lo + 1).astype(np.float64)
        mass = float(np.sum(self.counts * inside / width))
        return mass / self.row_count


def build_histogram(codes: np.ndarray, dom_size: int, bucket_count: int = 100) -> Histogram:
    """Equi-depth histogram over the non-null codes of one column."""
    row_count = len(codes)
    non_null = np.sort(codes[codes > 0], kind="stable")
    if len(non_null) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return Histogram(empty, empty, empty, row_count)
    k = min(bucket_count, len(non_null))
    splits = np.linspace(0, len(non_null), k + 1).round().astype(np.int64)
    lo = non_null[splits[:-1]]
    hi = non_null[np.maximum(splits[1:] - 1, 0)]
    counts = np.diff(splits)
    keep = counts > 0
    return Histogram(lo[keep].astype(np.int64), hi[keep].astype(np.int64),
                     counts[keep], row_count)


class HistogramSet:
    """One equi-depth histogram per column of the dataset."""

    def __init__(self, dataset: Dataset, bucket_count: int = 100):
        self.dataset = dataset
        self.histograms: dict[str, Histogram] = {}
        for table_name, table in dataset.tables.items():
            for column in table.columns.values():
                self.histograms[f"{table_name}.{column.name}"] = build_histogram(
                    column.codes, column.dom_size, bucket_count)


def estimate_independent(dataset: Dataset, query: WorkloadQuery,
                         histograms: HistogramSet | None = None) -> float:
    """Independence baseline: row counts times selectivities over distinct counts."""
    histograms = histograms or HistogramSet(dataset)
    estimate = 1.0
    for table in sorted(query.graph.vertices):
        estimate *= dataset.tables[table].row_count
    for attr in sorted(query.predicates):
        if attr not in histograms.histograms:
            raise KeyError(f"no histogram for predicated attribute {attr}")
        estimate *= histograms.histograms[attr].selectivity(query.predicates[attr])
    for edge in query.graph.edges:
        distinct = len(dataset.column(f"{edge.one_table}.{edge.one_column}").raw_values)
        estimate /= max(distinct, 1)
    return estimate


def downscale_edges(dataset: Dataset, query: WorkloadQuery) -> tuple[Edge, ...]:
    """Out-of-query edges whose many side points away from the query's tables.

    Orient every schema edge away from the query by a BFS seeded at the query
    vertices; an edge divides a sample only when walking it away from the
    query multiplies rows, i.e. when its child endpoint is the many side.
    """
    schema = dataset.schema
    adjacency: dict[str, list[tuple[str, Edge]]] = {t: [] for t in schema.tables}
    for edge in schema.edges:
        adjacency[edge.one_table].append((edge.many_table, edge))
        adjacency[edge.many_table].append((edge.one_table, edge))
    seen = set(query.graph.vertices)
    queue = sorted(seen)
    in_query = set(query.graph.edges)
    divisors: list[Edge] = []
    while queue:
        current = queue.pop(0)
        for neighbor, edge in sorted(adjacency[current], key=lambda p: (p[0], p[1])):
            if neighbor in seen:
                continue
            seen.add(neighbor)
            queue.append(neighbor)
            if edge not in in_query and neighbor == edge.many_table:
                divisors.append(edge)
    return tuple(sorted(divisors))


def estimate_universal(dataset: Dataset, estimator, query: WorkloadQuery,
                       config: InferenceConfig | None = None) -> float:
    """Universal-relation baseline over an estimator of the whole-schema join.

    The estimator must expose the standard session interface over the layout
    of the full outer join of every table (tree schemas only).
    """
    if not dataset.schema.is_tree():
        raise SchemaError("the universal-relation baseline needs a tree schema")
    config = config or InferenceConfig()
    layout = estimator.layout
    rng = np.random.Generator(np.random.PCG64(config.seed))
    n = config.sample_count
    session = estimator.session(n)
    score = np.ones(n, dtype=np.float64)

    pred_attrs = sorted(query.predicates,
                        key=lambda a: (len(query.predicates[a].codes), a))
    for attr in pred_attrs:
        spec = layout.spec(attr)
        mask = evaluate_predicate_range(query.predicates[attr], spec.dom_size)
        dists, owner = session.distributions(attr)
        masked = dists * mask
        totals = dists.sum(axis=1)
        admitted = masked.sum(axis=1)
        contrib = np.divide(admitted, totals, out=np.zeros_like(admitted), where=totals > 0)
        score *= contrib[owner]
        session.assign(attr, _draw(dists, masked, owner, rng))

    for table in sorted(query.graph.vertices):
        attr = flag_name(table)
        dists, owner = session.distributions(attr)
        totals = dists.sum(axis=1)
        p_true = np.divide(dists[:, FLAG_TRUE], totals,
                           out=np.zeros_like(totals), where=totals > 0)
        score *= p_true[owner]
        session.assign(attr, np.full(n, FLAG_TRUE, dtype=np.int32))

    for edge in downscale_edges(dataset, query):
        attr = fanout_name(edge)
        spec = layout.spec(attr)
        dists, owner = session.distributions(attr)
        values = _draw(dists, None, owner, rng)
        decode = np.asarray(spec.fanout_values, dtype=np.float64)
        raw = np.where(values > 0, decode[np.maximum(values, 1) - 1], 0.0)
        score /= np.maximum(raw, 1.0)
        session.assign(attr, values)

    return float(estimator.join_row_count) * float(np.mean(score))
