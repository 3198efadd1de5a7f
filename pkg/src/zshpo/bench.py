"""Leave-one-dataset-out benchmark harness.

Each dataset takes a turn as the unseen target: a selection method builds its
portfolio from the table with that column removed, then the portfolio is
replayed on the held-out column one member at a time.  After each evaluation
the reported number is the test error of the member with the best validation
error so far, converted to RED against the dataset's reference error.  The
module also provides the random-search baseline, mean / P90 aggregation with
uncertainties, pairwise method comparison, and tidy CSV emission for plots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from zshpo.mfhb import mf_run
from zshpo.obo import OboParams, naive_run, obo_run, surrogate_baseline_run
from zshpo.portfolio import Portfolio, exhaustive_select
from zshpo.tables import (
    PerformanceTable,
    drop_dataset,
    red,
    reference_losses,
    selection_matrix,
)


@dataclass(frozen=True)
class MethodSpec:
    """A named selection strategy plus the knobs it runs with.

    ``budget`` is in training jobs (table cells); ``None`` means the full
    table of whatever (sub)table the method is handed.  ``n_trees`` and
    ``eta`` only matter for the methods that use them.
    """

    name: str
    budget: int | None = None
    n_trees: int = 20
    eta: int = 3

    def resolved_budget(self, table: PerformanceTable) -> int:
        if self.budget is None:
            return table.n_configs * table.n_datasets
        return self.budget


def _run_naive(table, k, seed, spec):
    return naive_run(table, spec.resolved_budget(table), k, seed)


def _run_obo(table, k, seed, spec):
    params = OboParams(K=k, n_trees=spec.n_trees, seed=seed)
    return obo_run(table, params, spec.resolved_budget(table))[0]


def _run_mf(table, k, seed, spec):
    return mf_run(table, spec.resolved_budget(table), k, eta=spec.eta, seed=seed)[0]


def _run_surrogate(table, k, seed, spec):
    return surrogate_baseline_run(
        table, spec.resolved_budget(table), k, seed, n_trees=spec.n_trees
    )


def _run_exhaustive(table, k, seed, spec):
    return exhaustive_select(selection_matrix(table), k)


_RUNNERS: dict[str, Callable] = {
    "naive": _run_naive,
    "obo": _run_obo,
    "mf": _run_mf,
    "surrogate": _run_surrogate,
    "exhaustive": _run_exhaustive,
}


def register_method(name: str, runner: Callable) -> None:
    """Register a selection strategy under ``name``.

    ``runner(table, k, seed, spec)`` must return a
    :class:`~zshpo.portfolio.Portfolio` whose members index the table's
    configuration rows.
    """
    _RUNNERS[name] = runner


def run_method(spec: MethodSpec, table: PerformanceTable, k: int, seed: int) -> Portfolio:
    """Run the strategy named by ``spec`` on ``table``."""
    try:
        runner = _RUNNERS[spec.name]
    except KeyError:
        known = ", ".join(sorted(_RUNNERS))
        raise ValueError(f"unknown method {spec.name!r} (known: {known})") from None
    return runner(table, k, seed, spec)


@dataclass(frozen=True)
class LodoResult:
    """Hold-out traces of one method across datasets and seeds.

    ``red_traces[s, f, j]`` is the test RED on held-out dataset
    ``dataset_ids[f]`` after ``j + 1`` portfolio evaluations, for seed
    ``seeds[s]``; ``raw_traces`` holds the same test errors before RED
    conversion, which pairwise comparison needs.
    """

    method: str
    k: int
    seeds: tuple[int, ...]
    dataset_ids: tuple[int, ...]
    red_traces: np.ndarray
    raw_traces: np.ndarray

    def __post_init__(self) -> None:
        expected = (len(self.seeds), len(self.dataset_ids), self.k)
        for name in ("red_traces", "raw_traces"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != expected:
                raise ValueError(f"{name} must have shape {expected}, got {arr.shape}")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if not self.seeds or not self.dataset_ids:
            raise ValueError("at least one seed and one dataset are required")

    def per_dataset(self) -> np.ndarray:
        """Seed-averaged RED traces, shape (datasets, K)."""
        return self.red_traces.mean(axis=0)


def replay_on_held_out(
    table: PerformanceTable, members: Sequence[int], held_out: int, k: int
) -> np.ndarray:
    """Raw test errors of sequentially evaluating ``members`` on a column.

    Position ``j`` holds the test error of the member with the lowest
    validation error on the held-out dataset among the first ``j + 1``
    members (earliest member wins ties).  With fewer than ``k`` members the
    last value carries forward: evaluating nothing new changes nothing.
    """
    if not members:
        raise ValueError("cannot replay an empty portfolio")
    out = np.empty(k, dtype=np.float64)
    best_val = math.inf
    best_test = math.nan
    for j in range(k):
        if j < len(members):
            m = members[j]
            if table.val_loss[m, held_out] < best_val:
                best_val = float(table.val_loss[m, held_out])
                best_test = float(table.test_loss[m, held_out])
        out[j] = best_test
    return out


def lodo_fold(
    table: PerformanceTable, method: MethodSpec, k: int, seed: int, fold: int
) -> np.ndarray:
    """Raw test-error trace of one held-out fold.

    The method only ever sees the table with column ``fold`` dropped; any
    failure inside it is re-raised tagged with the fold and seed.
    """
    sub = drop_dataset(table, fold)
    try:
        portfolio = run_method(method, sub, k, seed)
    except Exception as exc:
        raise RuntimeError(
            f"method {method.name!r} failed on fold {fold} (seed {seed})"
        ) from exc
    return replay_on_held_out(table, portfolio.members, fold, k)


def lodo_evaluate(
    table: PerformanceTable,
    method: MethodSpec,
    k: int,
    seeds: Sequence[int],
) -> LodoResult:
    """Leave-one-dataset-out evaluation of ``method`` on ``table``.

    Every dataset is held out once per seed.  Reference errors for the RED
    conversion come from the full table (each dataset's reference depends
    only on its own column, so the held-out column never leaks into any
    other fold).
    """
    if table.n_datasets < 2:
        raise ValueError("leave-one-dataset-out needs at least 2 datasets")
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    reference = reference_losses(table)
    n_d = table.n_datasets
    raw = np.empty((len(seeds), n_d, k), dtype=np.float64)
    for si, seed in enumerate(seeds):
        for d in range(n_d):
            raw[si, d] = lodo_fold(table, method, k, seed, d)
    red_traces = red(raw, reference[np.newaxis, :, np.newaxis])
    return LodoResult(
        method=method.name,
        k=k,
        seeds=seeds,
        dataset_ids=tuple(range(n_d)),
        red_traces=red_traces,
        raw_traces=raw,
    )


def random_search_baseline(
    table: PerformanceTable, held_out: int, budget: int, seed: int
) -> np.ndarray:
    """Test-RED trace of random search on one dataset.

    Draws ``budget`` configurations uniformly without replacement and
    reports, after each draw, the test RED of the best-by-validation
    configuration so far.  Random search needs no source tasks, so it sees
    the held-out column directly.
    """
    if not 0 <= held_out < table.n_datasets:
        raise ValueError(f"held_out index {held_out} out of range")
    if not 1 <= budget <= table.n_configs:
        raise ValueError(
            f"budget must be in [1, {table.n_configs}] configurations, got {budget}"
        )
    reference = float(reference_losses(table)[held_out])
    draws = np.random.default_rng(seed).choice(
        table.n_configs, size=budget, replace=False
    )
    raw = replay_on_held_out(table, [int(c) for c in draws], held_out, budget)
    return np.asarray(red(raw, reference))


class AggregateCurve(NamedTuple):
    """Per-portfolio-size aggregate with a matching uncertainty vector."""

    values: np.ndarray
    errors: np.ndarray
    mode: str


def _p90_nearest_rank(values: np.ndarray, axis: int = 0) -> np.ndarray:
    ordered = np.sort(values, axis=axis)
    n = values.shape[axis]
    rank = max(int(math.ceil(0.9 * n)), 1) - 1
    return np.take(ordered, rank, axis=axis)


def aggregate(
    results: LodoResult, mode: str = "mean", bootstrap_seed: int = 0
) -> AggregateCurve:
    """Collapse a LODO result to one value (and uncertainty) per size.

    ``mean`` reports the mean across datasets of the seed-averaged RED with
    its standard error; ``p90`` reports the nearest-rank 90th percentile
    with the standard deviation of 1000 seeded bootstrap resamples.
    """
    per_dataset = results.per_dataset()
    n = per_dataset.shape[0]
    if mode == "mean":
        values = per_dataset.mean(axis=0)
        if n > 1:
            errors = per_dataset.std(axis=0, ddof=1) / math.sqrt(n)
        else:
            errors = np.zeros_like(values)
        return AggregateCurve(values, errors, mode)
    if mode == "p90":
        values = _p90_nearest_rank(per_dataset, axis=0)
        rng = np.random.default_rng(bootstrap_seed)
        resamples = rng.integers(0, n, size=(1000, n))
        boot = _p90_nearest_rank(per_dataset[resamples], axis=1)
        errors = boot.std(axis=0, ddof=1)
        return AggregateCurve(values, errors, mode)
    raise ValueError(f"unknown aggregation mode {mode!r}")


class ComparisonCell(NamedTuple):
    """Mean pairwise RED across datasets with its standard error."""

    mean_red: float
    std_err: float
    n: int


def compare(a: LodoResult, b: LodoResult) -> list[ComparisonCell]:
    """Per-portfolio-size RED of ``a``'s test errors against ``b``'s.

    The RED is taken fold by fold on the raw test errors (not on the
    already-normalized traces), averaged over seeds per dataset, then
    summarized across datasets.  Negative means ``a`` is better.
    """
    if a.k != b.k or a.dataset_ids != b.dataset_ids or a.seeds != b.seeds:
        raise ValueError("results cover different folds, seeds, or sizes")
    cell_values = np.asarray(red(a.raw_traces, b.raw_traces)).mean(axis=0)
    n = cell_values.shape[0]
    cells = []
    for j in range(a.k):
        column = cell_values[:, j]
        err = float(column.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        cells.append(ComparisonCell(float(column.mean()), err, n))
    return cells


def emit_plot_data(
    results: Sequence[LodoResult], output_path, mode: str = "mean"
) -> None:
    """Write one tidy CSV of aggregate curves: method, size, value, error."""
    if not results:
        raise ValueError("no results to emit")
    k = results[0].k
    if any(r.k != k for r in results):
        raise ValueError("results disagree on portfolio size")
    lines = ["method,portfolio_size,aggregate,std_err"]
    for result in results:
        curve = aggregate(result, mode)
        for j in range(k):
            lines.append(
                f"{result.method},{j + 1},"
                f"{float(curve.values[j])!r},{float(curve.errors[j])!r}"
            )
    Path(output_path).write_text("\n".join(lines) + "\n")
