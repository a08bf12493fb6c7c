"""Shared estimator interface: conditional distributions and batched sessions.

Every backend answers one question: given assigned attribute codes, what is
the distribution of another attribute over its dictionary?  Distributions are
non-negative and sum to 1 (within 1e-6).  Batched inference goes through a
ConditioningSession that keeps per-sample assignments; sessions may group
samples that share an assignment and return one distribution row per group.
"""

from __future__ import annotations

import abc

import numpy as np

from ..joiner import RelationLayout


class Estimator(abc.ABC):
    """Conditional-distribution backend over one joined relation."""

    layout: RelationLayout
    join_row_count: int

    @abc.abstractmethod
    def conditional_distribution(self, inputs: dict[str, int], target: str) -> np.ndarray:
        """P(target = code | inputs), a vector over the target's dictionary."""

    @abc.abstractmethod
    def session(self, sample_count: int) -> "ConditioningSession":
        """Open a batched session holding one assignment per sample."""


class ConditioningSession(abc.ABC):
    """Per-sample progressive assignments against one estimator.

    ``distributions`` returns (dists, owner): ``dists[owner[i]]`` is sample
    i's conditional distribution of the target.  Rows may be all-zero when the
    backend knows the conditioning has no support; callers score such samples
    zero but keep them alive.
    """

    @abc.abstractmethod
    def distributions(self, target: str) -> tuple[np.ndarray, np.ndarray]:
        ...

    @abc.abstractmethod
    def assign(self, target: str, values: np.ndarray) -> None:
        """Fix the target to the given per-sample codes."""
