"""Cardinality estimation by walking the subschema cover of a query.

The estimate starts from the row count of the root subschema's full outer
join and multiplies one factor per traversal step.  Within a step, each of N
parallel samples walks the estimator's conditionals: predicated attributes
are drawn from their filtered, renormalized distributions while the admitted
mass accumulates into the sample's probability; presence flags of the query's
member tables are conditioned to true; fanouts toward successor subschemas
are sampled and multiply the sample; finally the attributes shared with
successors are sampled into the bank that conditions the next step.  The
default step factor is the mean over samples of probability times fanout
product (one joint expectation); a config switch restores the separated
form (mean probability times the product of mean fanouts).

Upscaling only: no estimate ever divides by a fanout, and fanouts internal to
a subschema are not part of its layout at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import PredicateRange, WorkloadQuery
from .joiner import FLAG_TRUE, fanout_name, flag_name
from .schema import (QueryGraph, SchemaError, SubschemaHypergraph, TraversalPlan,
                     TraversalStep, build_traversal_plan, select_subschemas)


class InferenceError(ValueError):
    """Raised when a query cannot be estimated with the given estimators."""


@dataclass
class InferenceConfig:
    sample_count: int = 2000
    seed: int = 0
    joint_expectation: bool = True   # per-sample probability times fanouts in one mean
    conditioning: bool = True        # seed successor sessions from the sample bank
    root_index: int | None = None    # override the deterministic root choice


@dataclass
class StepReport:
    subschema_key: str
    selectivity: float
    mean_fanouts: dict[str, float]
    factor: float
    attributes_used: tuple[str, ...]


@dataclass
class EstimateResult:
    cardinality: float
    root_rows: int
    sample_count: int
    steps: list[StepReport] = field(default_factory=list)


def evaluate_predicate_range(pred: PredicateRange, dom_size: int) -> np.ndarray:
    """Boolean mask over codes admitted by a normalized predicate; NULL is never admitted."""
    if pred.dom_size != dom_size:
        raise InferenceError(
            f"predicate on {pred.attribute} was normalized against a dictionary of size "
            f"{pred.dom_size}, but the relation has {dom_size}")
    mask = np.zeros(dom_size, dtype=bool)
    mask[pred.codes] = True
    return mask


def _group_slices(owner: np.ndarray, n_groups: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(owner, kind="stable")
    bounds = np.searchsorted(owner[order], np.arange(n_groups + 1))
    return order, bounds


def _draw(dists: np.ndarray, masked: np.ndarray | None, owner: np.ndarray,
          rng: np.random.Generator) -> np.ndarray:
    """One code per sample from its group's distribution.

    Prefers the masked (filtered) distribution; falls back to the unfiltered
    one when the filter removed all mass, and to uniform over the dictionary
    when the group itself has no support.  Samples that needed a fallback
    have already scored zero; the fallback only keeps the bank populated.
    """
    n_groups, dom = dists.shape
    uniforms = rng.random(len(owner))
    if n_groups == len(owner) and np.array_equal(owner, np.arange(n_groups)):
        # one group per sample: row-wise inverse CDF, no per-group loop
        rows = dists
        if masked is not None:
            keep = masked.sum(axis=1, keepdims=True) > 0
            rows = np.where(keep, masked, dists)
        totals = rows.sum(axis=1)
        cum = np.cumsum(rows, axis=1)
        r = uniforms * np.where(totals > 0, totals, 1.0)
        values = (r[:, None] >= cum).sum(axis=1).astype(np.int32)
        dead = totals <= 0
        if dead.any():
            values[dead] = np.floor(uniforms[dead] * dom).astype(np.int32)
        return np.minimum(values, dom - 1)
    values = np.empty(len(owner), dtype=np.int32)
    order, bounds = _group_slices(owner, n_groups)
    for g in range(n_groups):
        members = order[bounds[g]:bounds[g + 1]]
        if len(members) == 0:
            continue
        row = None
        if masked is not None:
            row = masked[g]
            if row.sum() <= 0:
                row = None
        if row is None:
            row = dists[g]
            if row.sum() <= 0:
                values[members] = np.floor(uniforms[members] * dom).astype(np.int32)
                continue
        cum = np.cumsum(row)
        values[members] = np.searchsorted(
            cum, uniforms[members] * cum[-1], side="right").astype(np.int32)
    return np.minimum(values, dom - 1)


@dataclass
class StepOutcome:
    probs: np.ndarray
    fanout_product: np.ndarray
    fanout_raw: dict[str, np.ndarray]
    bank_updates: dict[str, np.ndarray]
    attributes_used: tuple[str, ...]


def estimate_step(estimator, query: WorkloadQuery, step: TraversalStep,
                  bank: dict[str, np.ndarray], sample_count: int,
                  rng: np.random.Generator, conditioning: bool = True) -> StepOutcome:
    """Run the progressive per-sample walk for one traversal step."""
    layout = estimator.layout
    session = estimator.session(sample_count)
    assigned: dict[str, np.ndarray] = {}
    used: list[str] = []

    if conditioning:
        for attr in sorted(bank):
            if attr in layout.index:
                values = bank[attr]
                session.assign(attr, values)
                assigned[attr] = values

    probs = np.ones(sample_count, dtype=np.float64)

    # Predicates, narrowest admitted range first.  Every listed predicate
    # excludes at least NULL, so none is vacuous; an attribute with no range
    # restriction is simply absent from the map.  Bank-pinned attributes were
    # drawn from their filtered distribution at an earlier step and are not
    # re-applied.
    pred_attrs = [a for a in layout.base_attributes()
                  if a in query.predicates and a not in assigned]
    pred_attrs.sort(key=lambda a: (len(query.predicates[a].codes), a))
    for attr in pred_attrs:
        spec = layout.spec(attr)
        mask = evaluate_predicate_range(query.predicates[attr], spec.dom_size)
        dists, owner = session.distributions(attr)
        used.append(attr)
        masked = dists * mask
        totals = dists.sum(axis=1)
        admitted = masked.sum(axis=1)
        contrib = np.divide(admitted, totals, out=np.zeros_like(admitted),
                            where=totals > 0)
        probs *= contrib[owner]
        values = _draw(dists, masked, owner, rng)
        session.assign(attr, values)
        assigned[attr] = values

    # Presence flags of the query's member tables, conditioned to true.
    for table in sorted(query.graph.vertices & set(layout.member_tables)):
        attr = flag_name(table)
        dists, owner = session.distributions(attr)
        used.append(attr)
        totals = dists.sum(axis=1)
        p_true = np.divide(dists[:, FLAG_TRUE], totals,
                           out=np.zeros_like(totals), where=totals > 0)
        probs *= p_true[owner]
        values = np.full(sample_count, FLAG_TRUE, dtype=np.int32)
        session.assign(attr, values)
        assigned[attr] = values

    # Fanouts toward successors: sampled, decoded to raw counts, multiplied.
    fanout_product = np.ones(sample_count, dtype=np.float64)
    fanout_raw: dict[str, np.ndarray] = {}
    for edge in step.fanout_edges:
        attr = fanout_name(edge)
        spec = layout.spec(attr)
        dists, owner = session.distributions(attr)
        used.append(attr)
        values = _draw(dists, None, owner, rng)
        decode = np.asarray(spec.fanout_values, dtype=np.float64)
        raw = np.where(values > 0, decode[np.maximum(values, 1) - 1], 0.0)
        fanout_product *= raw
        fanout_raw[attr] = raw
        session.assign(attr, values)
        assigned[attr] = values

    # Attributes shared with successors feed the bank; already-assigned
    # attributes keep their values.
    bank_updates: dict[str, np.ndarray] = {}
    for attr in step.common_attributes:
        if attr in assigned:
            bank_updates[attr] = assigned[attr]
            continue
        dists, owner = session.distributions(attr)
        used.append(attr)
        values = _draw(dists, None, owner, rng)
        session.assign(attr, values)
        assigned[attr] = values
        bank_updates[attr] = values

    return StepOutcome(probs, fanout_product, fanout_raw, bank_updates, tuple(used))


def estimate_cardinality(query: WorkloadQuery, hypergraph: SubschemaHypergraph,
                         estimators: dict[str, object],
                         config: InferenceConfig | None = None) -> EstimateResult:
    """Estimate the query's join cardinality by walking its subschema cover."""
    config = config or InferenceConfig()
    if config.sample_count < 1:
        raise InferenceError(f"need at least one progressive sample, got {config.sample_count}")
    selected = select_subschemas(hypergraph, query.graph)
    plan = build_traversal_plan(hypergraph.schema, selected, query.graph,
                                config.root_index)
    missing = [s.key for s in selected if s.key not in estimators]
    if missing:
        raise InferenceError(f"no estimator for subschema(s): {', '.join(missing)}")
    rng = np.random.Generator(np.random.PCG64(config.seed))
    root_estimator = estimators[plan.root.key]
    result = EstimateResult(0.0, root_estimator.join_row_count, config.sample_count)
    bank: dict[str, np.ndarray] = {}
    weights = np.ones(config.sample_count, dtype=np.float64)
    separated = 1.0
    for step in plan.steps:
        estimator = estimators[step.subschema.key]
        outcome = estimate_step(estimator, query, step, bank, config.sample_count,
                                rng, conditioning=config.conditioning)
        # Joint form: one expectation over the per-sample product across all
        # steps, so a sample zeroed anywhere contributes zero exactly once.
        # Separated form: per-step means of selectivity and of each fanout,
        # multiplied as scalars.
        weights *= outcome.probs * outcome.fanout_product
        step_factor = float(np.mean(outcome.probs))
        for raw in outcome.fanout_raw.values():
            step_factor *= float(np.mean(raw))
        separated *= step_factor
        bank.update(outcome.bank_updates)
        result.steps.append(StepReport(
            step.subschema.key,
            float(np.mean(outcome.probs)),
            {name: float(np.mean(raw)) for name, raw in outcome.fanout_raw.items()},
            step_factor,
            outcome.attributes_used,
        ))
    if config.joint_expectation:
        result.cardinality = float(root_estimator.join_row_count) * float(np.mean(weights))
    else:
        result.cardinality = float(root_estimator.join_row_count) * separated
    return result
