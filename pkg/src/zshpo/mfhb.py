"""Multi-fidelity portfolio construction on an anytime HyperBand schedule.

A run evaluates configurations on growing prefixes of a fixed shuffled
dataset order ("rungs" with exponentially growing resource), promotes the
most promising candidates upward, and occasionally starts fresh
configurations directly at higher rungs so that every bracket receives a
comparable share of the budget.  Each promotion targets one portfolio
location: candidates are scored by the loss they would contribute when
appended after the current best ``location - 1`` configurations, so the
rung ladder builds complementary portfolio members rather than a single
winner.  All evaluations go through a shared cache and every cached pair
is charged to the budget exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .obo import CLAMP_LOSS
from .portfolio import Portfolio, greedy_select
from .tables import PerformanceTable, selection_matrix


def rung_resource(s: int, eta: int) -> int:
    """Resource level (number of datasets) of rung ``s``: eta ** s."""
    if s < 0:
        raise ValueError("rung index must be non-negative")
    if eta < 2:
        raise ValueError("eta must be at least 2")
    return eta**s


def new_bracket_threshold(s: int, s_max: int) -> float:
    """Nominal promotion allowance of rung ``s`` between bracket starts:
    sum_{m=0}^{s-1} (s_max - s) / (s_max - m).

    Exposed for schedule diagnostics.  The run scheduler itself rotates
    brackets on the integer cycle ``s + 1`` (see ``mf_run``), which is
    the rotation length that actually equalizes the jobs invested at
    each starting rung under the 1/eta promotion gate; this closed form
    tracks the same quantity only loosely and under-rotates high rungs.
    """
    if s_max < 2 or not 1 <= s <= s_max - 1:
        raise ValueError(f"rung {s} has no bracket threshold for s_max={s_max}")
    return float(sum((s_max - s) / (s_max - m) for m in range(s)))


@dataclass
class HyperBandState:
    """Mutable bookkeeping for one multi-fidelity run.

    ``rung`` maps a configuration to the highest rung it has completed;
    ``cache`` holds every loss observed so far, keyed by (config index,
    dataset index).  Per-location job counters and the
    fully-evaluated-candidate flags drive the location balancing.
    """

    eta: int
    s_max: int
    n_locations: int
    dataset_order: np.ndarray
    cache: dict[tuple[int, int], float] = field(default_factory=dict)
    rung: dict[int, int] = field(default_factory=dict)
    start_rung: dict[int, int] = field(default_factory=dict)
    entered: list[int] = field(default_factory=list)
    promoted_out: list[int] = field(default_factory=list)
    bracket_counter: list[float] = field(default_factory=list)
    location_resources: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    has_full_candidate: list[bool] = field(default_factory=list)
    literal_lmax_fallback: bool = False

    def __post_init__(self) -> None:
        if not self.entered:
            self.entered = [0] * (self.s_max + 1)
        if not self.promoted_out:
            self.promoted_out = [0] * self.s_max
        if not self.bracket_counter:
            # Counters start at the cycle boundary so every rung issues its
            # first bracket start after a single promotion; without the
            # priming, short runs under-fund the high starting rungs.
            self.bracket_counter = [float(s) for s in range(self.s_max)]
        if self.location_resources.size == 0:
            self.location_resources = np.zeros(self.n_locations, dtype=int)
        if not self.has_full_candidate:
            self.has_full_candidate = [False] * self.n_locations

    @property
    def n_datasets(self) -> int:
        return int(self.dataset_order.size)

    def resource(self, s: int) -> int:
        """Datasets evaluated by a rung-``s`` candidate; the top rung is
        capped at the full collection even when eta ** s overshoots it."""
        return min(rung_resource(s, self.eta), self.n_datasets)

    def is_fully_evaluated(self, config: int) -> bool:
        return all((config, int(d)) in self.cache for d in self.dataset_order)

    def fully_evaluated(self) -> list[int]:
        return sorted(c for c in self.rung if self.is_fully_evaluated(c))

    def rung_members(self, s: int) -> list[int]:
        return sorted(c for c, r in self.rung.items() if r == s)


def partial_prefix_loss(
    config: int,
    location: int,
    r: int,
    state: HyperBandState,
    incumbents: Sequence[int],
) -> float:
    """Sum over the first ``r`` datasets (in the run's fixed order) of
    min(best incumbent loss before ``location``, loss of ``config``).

    With ``location`` 1 the incumbent prefix is empty and the sum is the
    candidate's own losses.  All needed cells must already be cached.
    """
    members = list(incumbents)[: location - 1]
    total = 0.0
    for pos in range(r):
        d = int(state.dataset_order[pos])
        try:
            value = state.cache[(config, d)]
            for m in members:
                value = min(value, state.cache[(int(m), d)])
        except KeyError as exc:
            raise RuntimeError(
                f"loss for pair {exc.args[0]} is not cached; scoring requires "
                f"the first {r} datasets of the run order"
            ) from None
        total += value
    return total


def target_location(
    state: HyperBandState, rho: Sequence[float], r: Sequence[float]
) -> int:
    """Location (1-based) whose spent resources are furthest below its
    share: argmin of r_i * rho_i over the eligible locations.

    Eligible locations run up to the smallest one whose logical instance
    has no fully evaluated candidate yet; when every instance has one,
    all locations are eligible (or just location 1 when the state asks
    for the literal fallback).  Ties go to the lowest location.
    """
    l_max = state.n_locations if not state.literal_lmax_fallback else 1
    for i, full in enumerate(state.has_full_candidate):
        if not full:
            l_max = i + 1
            break
    costs = [float(r[i]) * float(rho[i]) for i in range(l_max)]
    return 1 + min(range(l_max), key=costs.__getitem__)


def _incumbent_members(state: HyperBandState, count: int, matrix: np.ndarray) -> list[int]:
    """First ``count`` members of the greedy portfolio over the configs
    already evaluated on all datasets (empty early in a run)."""
    if count <= 0:
        return []
    full = state.fully_evaluated()
    if not full:
        return []
    sub = matrix[np.array(full, dtype=int), :]
    chosen = greedy_select(sub, min(count, len(full)))
    return [full[i] for i in chosen.members]


def _best_candidate(
    state: HyperBandState,
    rung_members: Iterable[int],
    location: int,
    matrix: np.ndarray,
) -> int:
    members = sorted(int(c) for c in rung_members)
    if not members:
        raise ValueError("candidate selection needs a non-empty rung")
    rungs = {state.rung[c] for c in members}
    if len(rungs) != 1:
        raise ValueError("candidates must all sit in the same rung")
    r = state.resource(rungs.pop())
    incumbents = _incumbent_members(state, location - 1, matrix)
    best = members[0]
    best_score = np.inf
    for c in members:
        score = partial_prefix_loss(c, location, r, state, incumbents)
        if score < best_score:
            best, best_score = c, score
    return best


def select_candidate(
    state: HyperBandState,
    rung_members: Iterable[int],
    rho: Sequence[float],
    r: Sequence[float],
    matrix: np.ndarray,
) -> int:
    """Pick the rung member to promote next: choose the location whose
    resource share lags most, then the member whose appended partial loss
    after the current best ``location - 1`` incumbents is lowest."""
    location = target_location(state, rho, r)
    return _best_candidate(state, rung_members, location, matrix)


class MfTraceRow(NamedTuple):
    step: int
    action: str
    config_index: int
    from_rung: int
    to_rung: int
    target_location: int
    jobs_charged: int
    budget_used: int
    current_portfolio_meta_loss: float


@dataclass(frozen=True)
class MfTrace:
    """Chronological record of one mf_run, one row per scheduler action."""

    rows: tuple[MfTraceRow, ...]

    COLUMNS = (
        "step",
        "action",
        "config_index",
        "from_rung",
        "to_rung",
        "target_location",
        "jobs_charged",
        "budget_used",
        "current_portfolio_meta_loss",
    )

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for row in self.rows:
            lines.append(
                f"{row.step},{row.action},{row.config_index},{row.from_rung},"
                f"{row.to_rung},{row.target_location},{row.jobs_charged},"
                f"{row.budget_used},{row.current_portfolio_meta_loss!r}"
            )
        return "\n".join(lines) + "\n"


def default_resource_ratio(k: int) -> np.ndarray:
    """Geometrically decaying location shares: rho_i proportional to
    2**-(i-1), normalized.  Early locations shape every portfolio prefix,
    so they deserve the larger share."""
    if k < 1:
        raise ValueError("need at least one location")
    rho = 0.5 ** np.arange(k, dtype=np.float64)
    return rho / rho.sum()


def _portfolio_from_full(state: HyperBandState, matrix: np.ndarray, k: int) -> Portfolio:
    full = state.fully_evaluated()
    if not full:
        return Portfolio(members=[], step_losses=[])
    ids = np.array(full, dtype=int)
    chosen = greedy_select(matrix[ids, :], min(k, len(full)))
    return Portfolio(
        members=[full[i] for i in chosen.members],
        step_losses=list(chosen.step_losses),
    )


def mf_run(
    table: PerformanceTable,
    budget: int,
    K: int,
    eta: int = 3,
    rho: Sequence[float] | None = None,
    seed: int = 0,
    literal_lmax_fallback: bool = False,
) -> tuple[Portfolio, MfTrace]:
    """Run anytime HyperBand with per-location candidate selection.

    Scans rungs top-down each cycle; a rung with fewer than 1/eta of its
    entrants promoted either promotes its best member or, when its
    bracket counter exceeds the balancing threshold, starts a fresh
    configuration one rung higher.  A cycle with no promotion starts a
    fresh configuration at rung 0.  Promotions only evaluate the
    datasets the config has not seen (shared-cache information reuse);
    every new evaluation costs one budget unit and is charged to the
    targeted location.  Returns the greedy portfolio over fully
    evaluated configs plus the action trace.
    """
    matrix = selection_matrix(table)
    n, d = matrix.shape
    if budget < d:
        raise ValueError(f"budget {budget} is below one full evaluation ({d} jobs)")
    if not 1 <= K <= n:
        raise ValueError(f"K must be in [1, {n}], got {K}")
    if eta < 2:
        raise ValueError("eta must be at least 2")
    if rho is None:
        rho_arr = default_resource_ratio(K)
    else:
        rho_arr = np.asarray(rho, dtype=np.float64)
        if rho_arr.shape != (K,):
            raise ValueError(f"rho must have length {K}")
        if np.any(rho_arr <= 0):
            raise ValueError("rho entries must be positive")
        rho_arr = rho_arr / rho_arr.sum()

    s_max = 0
    while rung_resource(s_max, eta) < d:
        s_max += 1

    rng = np.random.default_rng(seed)
    dataset_order = rng.permutation(d)
    config_queue = rng.permutation(n)
    queue_pos = 0

    state = HyperBandState(
        eta=eta,
        s_max=s_max,
        n_locations=K,
        dataset_order=dataset_order,
        literal_lmax_fallback=literal_lmax_fallback,
    )
    budget_cap = min(budget, n * d)
    budget_used = 0
    rows: list[MfTraceRow] = []

    def evaluate(config: int, target_rung: int) -> tuple[int, bool]:
        """Evaluate the config's uncached prefix datasets up to the target
        rung's resource; returns (jobs charged, action completed)."""
        nonlocal budget_used
        jobs = 0
        for pos in range(state.resource(target_rung)):
            dd = int(dataset_order[pos])
            if (config, dd) in state.cache:
                continue
            if budget_used >= budget_cap:
                return jobs, False
            state.cache[(config, dd)] = float(matrix[config, dd])
            budget_used += 1
            jobs += 1
        return jobs, True

    def record(action: str, config: int, from_rung: int, to_rung: int,
               location: int, jobs: int) -> None:
        current = _portfolio_from_full(state, matrix, K)
        meta = current.step_losses[-1] if current.members else CLAMP_LOSS
        rows.append(MfTraceRow(
            step=len(rows) + 1,
            action=action,
            config_index=config,
            from_rung=from_rung,
            to_rung=to_rung,
            target_location=location,
            jobs_charged=jobs,
            budget_used=budget_used,
            current_portfolio_meta_loss=meta,
        ))

    def next_fresh() -> int | None:
        nonlocal queue_pos
        if queue_pos >= len(config_queue):
            return None
        config = int(config_queue[queue_pos])
        queue_pos += 1
        return config

    def enter(config: int, rung: int, location: int) -> None:
        state.rung[config] = rung
        state.start_rung[config] = rung
        state.entered[rung] += 1
        if rung == s_max:
            state.has_full_candidate[location - 1] = True

    def run_action(s: int | None) -> None:
        """Serve rung ``s`` (promote or bracket-fresh), or rung-0 fresh /
        gate-free drain when ``s`` is None."""
        location = target_location(state, rho_arr, state.location_resources)
        # One fresh start at rung s+1 per s+1 promotions out of rung s: with
        # survivor flows thinned by 1/eta per rung, every bracket then spends
        # the same number of jobs at its starting rung.
        if s is not None and float(s) < state.bracket_counter[s]:
            fresh = next_fresh()
            if fresh is not None:
                state.bracket_counter[s] = 0.0
                jobs, complete = evaluate(fresh, s + 1)
                state.location_resources[location - 1] += jobs
                if complete:
                    enter(fresh, s + 1, location)
                record("fresh", fresh, -1, s + 1, location, jobs)
                return
        if s is None:
            fresh = next_fresh()
            if fresh is not None:
                jobs, complete = evaluate(fresh, 0)
                state.location_resources[location - 1] += jobs
                if complete:
                    enter(fresh, 0, location)
                record("fresh", fresh, -1, 0, location, jobs)
                return
            for drain_s in range(s_max - 1, -1, -1):
                if state.rung_members(drain_s):
                    s = drain_s
                    break
            else:
                return
        candidate = _best_candidate(state, state.rung_members(s), location, matrix)
        jobs, complete = evaluate(candidate, s + 1)
        state.location_resources[location - 1] += jobs
        if complete:
            state.rung[candidate] = s + 1
            state.entered[s + 1] += 1
            state.promoted_out[s] += 1
            state.bracket_counter[s] += 1.0
            if s + 1 == s_max:
                state.has_full_candidate[location - 1] = True
        record("promote", candidate, s, s + 1, location, jobs)

    while budget_used < budget_cap:
        promoted_before = len(rows)
        for s in range(s_max - 1, -1, -1):
            if budget_used >= budget_cap:
                break
            if state.eta * state.promoted_out[s] >= state.entered[s]:
                continue
            run_action(s)
        if budget_used >= budget_cap:
            break
        if len(rows) == promoted_before:
            before = len(rows)
            run_action(None)
            if len(rows) == before:
                break

    portfolio = _portfolio_from_full(state, matrix, K)
    return portfolio, MfTrace(rows=tuple(rows))
