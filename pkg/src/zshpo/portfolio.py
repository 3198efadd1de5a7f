"""Portfolio-level loss and offline selection over a complete loss matrix.

The portfolio loss of a set S of configurations is the average, over
datasets, of the best loss any member achieves there:

    L(S) = mean_d min_{i in S} loss[i, d]

L is monotone decreasing and supermodular in S (adding a member helps less
the larger the set already is), which is what makes the greedy sweep in
:func:`greedy_select` a constant-factor approximation of the best possible
portfolio of the same size.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

#: Cap on the number of subsets :func:`exhaustive_select` will enumerate.
EXHAUSTIVE_LIMIT = 1_000_000

OBJECTIVES = ("mean", "p90")


def _p90_index(n: int) -> int:
    # nearest-rank 90th percentile on n values (1-based ceil(0.9 n))
    return max(math.ceil(0.9 * n), 1) - 1


def _aggregate(per_dataset: np.ndarray, objective: str, axis: int = -1):
    if objective == "mean":
        return per_dataset.mean(axis=axis)
    if objective == "p90":
        idx = _p90_index(per_dataset.shape[axis])
        return np.sort(per_dataset, axis=axis).take(idx, axis=axis)
    raise ValueError(f"unknown objective {objective!r}")


def _check_matrix(loss) -> np.ndarray:
    loss = np.asarray(loss, dtype=np.float64)
    if loss.ndim != 2 or loss.shape[0] < 1 or loss.shape[1] < 1:
        raise ValueError(f"loss matrix must be 2-d and non-empty, got shape {loss.shape}")
    if not np.all(np.isfinite(loss)):
        raise ValueError("loss matrix must be finite")
    return loss


def meta_loss(members, loss, objective: str = "mean") -> float:
    """Portfolio loss of ``members`` (row indices) on ``loss``.

    ``objective`` aggregates the per-dataset minima: "mean" (default) or
    "p90" (nearest-rank 90th percentile).
    """
    loss = _check_matrix(loss)
    idx = [int(j) for j in members]
    if not idx:
        raise ValueError("members must be non-empty; see empty_set_loss")
    for j in idx:
        if not 0 <= j < loss.shape[0]:
            raise ValueError(f"config index {j} out of range for {loss.shape[0]} configs")
    rows = loss[idx, :]
    return float(_aggregate(rows.min(axis=0), objective))


def empty_set_loss(loss, objective: str = "mean") -> float:
    """Baseline loss of the empty portfolio: aggregate of the per-dataset
    worst (maximum) loss.  Improvements of non-empty portfolios are measured
    from this value."""
    loss = _check_matrix(loss)
    return float(_aggregate(loss.max(axis=0), objective))


def marginal_gain(members, candidate: int, loss, objective: str = "mean") -> float:
    """Decrease in portfolio loss from adding ``candidate`` to ``members``.

    Non-negative (monotonicity).  ``members`` may be empty, in which case the
    gain is measured from :func:`empty_set_loss`.  The candidate must not
    already be a member (a second copy of an index is meaningless; a
    *different* config with identical losses is fine and gains zero).
    """
    members = list(members)
    if candidate in members:
        raise ValueError(f"candidate {candidate} is already a member")
    before = (
        empty_set_loss(loss, objective) if not members else meta_loss(members, loss, objective)
    )
    return before - meta_loss(members + [candidate], loss, objective)


@dataclass
class Portfolio:
    """An ordered portfolio and the loss after each prefix.

    ``step_losses[j]`` is the portfolio loss of ``members[: j + 1]``; the
    sequence is non-increasing and members are distinct.
    """

    members: list
    step_losses: list

    def __post_init__(self):
        self.members = [int(i) for i in self.members]
        self.step_losses = [float(x) for x in self.step_losses]
        if len(self.members) != len(self.step_losses):
            raise ValueError(
                f"{len(self.members)} members but {len(self.step_losses)} step losses"
            )
        if len(set(self.members)) != len(self.members):
            raise ValueError(f"duplicate members in {self.members}")
        for a, b in zip(self.step_losses, self.step_losses[1:]):
            if b > a:
                raise ValueError(f"step losses must be non-increasing, got {self.step_losses}")

    def __len__(self) -> int:
        return len(self.members)

    def to_json(self) -> str:
        return json.dumps({"members": self.members, "step_losses": self.step_losses})

    @classmethod
    def from_json(cls, text: str) -> "Portfolio":
        obj = json.loads(text)
        return cls(obj["members"], obj["step_losses"])


def greedy_select(loss, k: int, objective: str = "mean") -> Portfolio:
    """Greedy portfolio of size ``k``: each step adds the configuration that
    minimizes the resulting portfolio loss, ties going to the lowest config
    index.  Already-selected rows are excluded from later steps so members
    stay distinct (a re-pick could only ever tie, never win)."""
    loss = _check_matrix(loss)
    n = loss.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    best = np.full(loss.shape[1], np.inf)
    taken = np.zeros(n, dtype=bool)
    members = []
    step_losses = []
    for _ in range(k):
        candidate_best = np.minimum(best[np.newaxis, :], loss)
        scores = _aggregate(candidate_best, objective, axis=1)
        scores[taken] = np.inf
        pick = int(np.argmin(scores))  # argmin returns the first, lowest index wins
        members.append(pick)
        step_losses.append(float(scores[pick]))
        best = candidate_best[pick]
        taken[pick] = True
    return Portfolio(members, step_losses)


def exhaustive_select(loss, k: int, objective: str = "mean") -> Portfolio:
    """Best portfolio of size ``k`` by enumerating all index subsets.

    Ties are broken toward the lexicographically smallest index tuple.
    Refuses problems with more than ``EXHAUSTIVE_LIMIT`` subsets.
    """
    loss = _check_matrix(loss)
    n = loss.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    n_subsets = math.comb(n, k)
    if n_subsets > EXHAUSTIVE_LIMIT:
        raise ValueError(
            f"C({n}, {k}) = {n_subsets} subsets exceeds the enumeration cap "
            f"{EXHAUSTIVE_LIMIT}"
        )
    best_members = None
    best_value = np.inf
    for combo in itertools.combinations(range(n), k):
        value = float(_aggregate(loss[list(combo), :].min(axis=0), objective))
        if value < best_value:  # strict: the first (lexicographically
            best_value = value  # smallest) optimal tuple is kept
            best_members = combo
    members = list(best_members)
    step_losses = [meta_loss(members[: j + 1], loss, objective) for j in range(k)]
    return Portfolio(members, step_losses)
