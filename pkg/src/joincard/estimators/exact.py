"""Exact empirical backend: conditional frequencies over materialized rows.

The oracle backend for convergence tests.  Sessions keep samples grouped by
their assignment so far, each group holding the matching row set; refining by
one attribute splits groups by the drawn code, so the whole batch costs time
proportional to rows touched rather than samples times rows.
"""

from __future__ import annotations

import numpy as np

from .base import ConditioningSession, Estimator
from ..joiner import JoinedRelation, RelationLayout


class ExactEmpiricalEstimator(Estimator):
    """Exact conditionals over a materialized joined relation."""

    def __init__(self, relation: JoinedRelation, join_row_count: int | None = None):
        self.layout = relation.layout
        self.codes = relation.codes
        self.join_row_count = relation.row_count if join_row_count is None else join_row_count

    def conditional_distribution(self, inputs: dict[str, int], target: str) -> np.ndarray:
        rows = np.ones(len(self.codes), dtype=bool)
        for name, code in inputs.items():
            rows &= self.codes[:, self.layout.position(name)] == code
        spec = self.layout.spec(target)
        selected = self.codes[rows, self.layout.position(target)]
        if len(selected) == 0:
            # No support under this conditioning: fall back to uniform.
            return np.full(spec.dom_size, 1.0 / spec.dom_size)
        hist = np.bincount(selected, minlength=spec.dom_size).astype(np.float64)
        return hist / hist.sum()

    def session(self, sample_count: int) -> "ExactSession":
        return ExactSession(self, sample_count)


class ExactSession(ConditioningSession):
    def __init__(self, estimator: ExactEmpiricalEstimator, sample_count: int):
        self.estimator = estimator
        self.codes = estimator.codes
        self.layout: RelationLayout = estimator.layout
        self.sample_count = sample_count
        self.group_rows: list[np.ndarray] = [np.arange(len(self.codes), dtype=np.int64)]
        self.owner = np.zeros(sample_count, dtype=np.int64)

    def distributions(self, target: str) -> tuple[np.ndarray, np.ndarray]:
        spec = self.layout.spec(target)
        pos = self.layout.position(target)
        dists = np.zeros((len(self.group_rows), spec.dom_size), dtype=np.float64)
        for g, rows in enumerate(self.group_rows):
            if len(rows):
                hist = np.bincount(self.codes[rows, pos], minlength=spec.dom_size)
                dists[g] = hist / len(rows)
        return dists, self.owner

    def assign(self, target: str, values: np.ndarray) -> None:
        pos = self.layout.position(target)
        order = np.argsort(self.owner, kind="stable")
        bounds = np.searchsorted(self.owner[order], np.arange(len(self.group_rows) + 1))
        new_groups: list[np.ndarray] = []
        new_owner = np.empty_like(self.owner)
        for g, rows in enumerate(self.group_rows):
            members = order[bounds[g]:bounds[g + 1]]
            if len(members) == 0:
                continue
            member_values = values[members]
            row_codes = self.codes[rows, pos] if len(rows) else np.empty(0, dtype=np.int32)
            row_order = np.argsort(row_codes, kind="stable")
            sorted_codes = row_codes[row_order]
            for code in np.unique(member_values):
                lo = np.searchsorted(sorted_codes, code, side="left")
                hi = np.searchsorted(sorted_codes, code, side="right")
                new_owner[members[member_values == code]] = len(new_groups)
                new_groups.append(rows[row_order[lo:hi]])
        self.group_rows = new_groups
        self.owner = new_owner
