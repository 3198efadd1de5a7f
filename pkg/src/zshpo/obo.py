"""Sequential evaluation selection under a job budget.

Instead of evaluating a fixed random sample of configurations like the naive
portfolio pipeline, the optimizer here decides, one training job at a time,
which (configuration, dataset) cell of the table to pay for next.  Each step
refits a random-forest surrogate on everything observed so far, scores every
candidate and portfolio location by the expected positive meta-loss reduction
per remaining job, then picks the dataset with the largest expected drop.

Losses are RED-normalized before any fitting or acquisition, so 1.0 (the RED
upper bound) stands in for "not evaluated yet" in all partial meta-losses.
The module also houses the two sampling baselines that share this budget
discipline: a full-random one and one that imputes unevaluated cells with
per-dataset surrogates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .forest import FeatureMatrix, FeatureSpec, ForestModel, fit_forest
from .portfolio import Portfolio, greedy_select, meta_loss
from .tables import ConfigRecord, PerformanceTable, selection_matrix

CLAMP_LOSS = 1.0
"""Stand-in loss for unevaluated cells: the upper bound of the RED range."""


@dataclass
class OboParams:
    """Knobs of :func:`obo_run`.

    ``warm_start_configs`` random candidates are fully evaluated before the
    first surrogate fit so the incumbent portfolio and the fit target are
    both non-trivial.
    """

    K: int
    n_trees: int = 20
    warm_start_configs: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.n_trees < 1:
            raise ValueError("n_trees must be at least 1")
        if self.warm_start_configs < 1:
            raise ValueError("warm_start_configs must be at least 1")


@dataclass
class EvaluationLedger:
    """Which cells of the (configuration, dataset) table have been paid for.

    ``observed`` maps (config index, dataset index) to the RED loss seen
    there; anything absent counts as :data:`CLAMP_LOSS`.  ``features``
    caches the encoded feature rows of every cell so acquisition does not
    re-encode the pool at each step.
    """

    configs: tuple[ConfigRecord, ...]
    n_datasets: int
    k: int
    budget_total: int
    observed: dict[tuple[int, int], float] = field(default_factory=dict)
    budget_used: int = 0
    candidate_pool: tuple[int, ...] = ()
    current_portfolio: Portfolio | None = None
    features: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not self.configs:
            raise ValueError("ledger needs at least one configuration")
        if self.n_datasets < 1 or self.k < 1 or self.budget_total < 1:
            raise ValueError("n_datasets, k and budget_total must be positive")
        if not self.candidate_pool:
            self.candidate_pool = tuple(range(len(self.configs)))

    @property
    def n_configs(self) -> int:
        return len(self.configs)

    def observe(self, config: int, dataset: int, loss: float) -> None:
        """Record one paid evaluation; every cell may be charged only once."""
        if not 0 <= config < self.n_configs:
            raise ValueError(f"config index {config} out of range")
        if not 0 <= dataset < self.n_datasets:
            raise ValueError(f"dataset index {dataset} out of range")
        if (config, dataset) in self.observed:
            raise ValueError(f"cell ({config}, {dataset}) already observed")
        if self.budget_used >= self.budget_total:
            raise ValueError("budget exhausted")
        self.observed[(config, dataset)] = float(loss)
        self.budget_used += 1

    def unobserved_datasets(self, config: int) -> list[int]:
        return [d for d in range(self.n_datasets) if (config, d) not in self.observed]

    def fully_observed(self) -> list[int]:
        return [c for c in range(self.n_configs) if not self.unobserved_datasets(c)]

    def all_observed(self) -> bool:
        return len(self.observed) == self.n_configs * self.n_datasets

    def clamped_matrix(self) -> np.ndarray:
        out = np.full((self.n_configs, self.n_datasets), CLAMP_LOSS)
        for (c, d), loss in self.observed.items():
            out[c, d] = loss
        return out

    def cell_features(self, spec: FeatureSpec) -> np.ndarray:
        """Encoded rows for every cell, shape (configs, datasets, features)."""
        if self.features is None:
            stacked = np.stack(
                [spec.encode_rows(self.configs, d) for d in range(self.n_datasets)],
                axis=1,
            )
            self.features = stacked
        return self.features


def partial_meta_loss(ledger: EvaluationLedger, members: Sequence[int], upto: int) -> float:
    """Meta-loss of the first ``upto`` members over the clamped ledger.

    Datasets where every counted member is unevaluated contribute
    :data:`CLAMP_LOSS`; ``upto = 0`` therefore gives exactly 1.0.
    """
    members = [int(m) for m in members]
    if not 0 <= upto <= len(members):
        raise ValueError(f"upto must be in [0, {len(members)}], got {upto}")
    for m in members:
        if not 0 <= m < ledger.n_configs:
            raise ValueError(f"config index {m} out of range")
    total = 0.0
    for d in range(ledger.n_datasets):
        best = CLAMP_LOSS
        for m in members[:upto]:
            best = min(best, ledger.observed.get((m, d), CLAMP_LOSS))
        total += best
    return total / ledger.n_datasets


def _member_prefix(ledger: EvaluationLedger) -> np.ndarray:
    """Element-wise prefix minima of the incumbent's clamped rows.

    prefix[i] is the min over the incumbent's first i members; prefix[0] is
    all clamps, standing in for the empty min.  Prefixes beyond the
    incumbent's length repeat the full minimum.
    """
    portfolio = ledger.current_portfolio
    members = list(portfolio.members) if portfolio is not None else []
    d = ledger.n_datasets
    prefix = np.full((ledger.k + 1, d), CLAMP_LOSS)
    for i in range(ledger.k):
        if i < len(members):
            row = np.array(
                [ledger.observed.get((members[i], dd), CLAMP_LOSS) for dd in range(d)]
            )
            prefix[i + 1] = np.minimum(prefix[i], row)
        else:
            prefix[i + 1] = prefix[i]
    return prefix


def _pool_samples(ledger: EvaluationLedger, model: ForestModel) -> np.ndarray:
    """Per-tree predictions for every cell, shape (trees, configs, datasets)."""
    if model.spec is None:
        raise ValueError("model must carry the feature spec it was fitted with")
    q = ledger.cell_features(model.spec)
    flat = q.reshape(ledger.n_configs * ledger.n_datasets, q.shape[2])
    samples = model.samples_matrix(flat)
    return samples.reshape(model.n_trees, ledger.n_configs, ledger.n_datasets)


def acquire_config_location(
    ledger: EvaluationLedger, model: ForestModel, samples: np.ndarray | None = None
) -> tuple[int, int]:
    """Choose which configuration to push toward which portfolio location.

    Each candidate is imagined fully evaluated: observed cells keep their
    recorded losses, unobserved ones take the per-tree predictions.  The
    score of (candidate, location l) is the expected positive part, over
    posterior samples, of the summed drop of the incumbent's first-l prefix
    minimum if the candidate replaced location l, divided by the candidate's
    number of unobserved datasets (the jobs still needed to realize the
    imagined full evaluation).  Fully observed candidates are excluded; ties
    fall to the lowest config index, then the lowest location.  Locations
    are 1-based.

    ``samples`` takes a precomputed per-tree prediction cube for the whole
    pool so one prediction pass can serve both acquisition stages of a step;
    when omitted the cube is computed here.
    """
    pool = list(ledger.candidate_pool)
    unobs_counts = np.array([len(ledger.unobserved_datasets(c)) for c in pool])
    if not np.any(unobs_counts > 0):
        raise ValueError("every candidate is fully observed; nothing to acquire")

    if samples is None:
        samples = _pool_samples(ledger, model)
    samples = samples[:, pool, :]
    clamped = ledger.clamped_matrix()[pool, :]
    # an observed cell may legitimately hold the clamp value, so membership
    # in the ledger, not the value, decides what counts as known
    truth_known = np.zeros_like(clamped, dtype=bool)
    for i, c in enumerate(pool):
        for d in range(ledger.n_datasets):
            if (c, d) in ledger.observed:
                truth_known[i, d] = True
    # candidate losses under each posterior sample: recorded where known,
    # sampled where not
    ell = np.where(truth_known[np.newaxis, :, :], clamped[np.newaxis, :, :], samples)

    prefix = _member_prefix(ledger)
    scores = np.full((len(pool), ledger.k), -np.inf)
    eligible = unobs_counts > 0
    for loc in range(1, ledger.k + 1):
        new_prefix = np.minimum(prefix[loc - 1][np.newaxis, np.newaxis, :], ell)
        reduction = (prefix[loc][np.newaxis, np.newaxis, :] - new_prefix).sum(axis=2)
        gain = np.clip(reduction, 0.0, None).mean(axis=0)
        scores[eligible, loc - 1] = gain[eligible] / unobs_counts[eligible]

    flat_best = np.argwhere(scores == scores.max())[0]
    return pool[int(flat_best[0])], int(flat_best[1]) + 1


def acquire_dataset(
    ledger: EvaluationLedger,
    model: ForestModel,
    config: int,
    location: int,
    samples: np.ndarray | None = None,
) -> int:
    """Choose which dataset to evaluate ``config`` on for ``location``.

    Among the configuration's unobserved datasets, picks the one whose
    expected post-observation value min(sampled loss, incumbent prefix
    before the location) drops furthest below the current clamped prefix.
    Ties fall to the lowest dataset index.  ``samples`` works as in
    :func:`acquire_config_location`.
    """
    unobserved = ledger.unobserved_datasets(config)
    if not unobserved:
        raise ValueError(f"config {config} has no unobserved datasets")
    if not 1 <= location <= ledger.k:
        raise ValueError(f"location must be in [1, {ledger.k}], got {location}")

    if samples is None:
        samples = _pool_samples(ledger, model)
    before = _member_prefix(ledger)[location - 1][unobserved]
    samples = samples[:, config, unobserved]
    expected = np.minimum(samples, before[np.newaxis, :]).mean(axis=0)
    return unobserved[int(np.argmin(expected - before))]


class OboTraceRow(NamedTuple):
    step: int
    config_index: int
    dataset_index: int
    location: int
    observed_loss: float
    incumbent_meta_loss: float


@dataclass(frozen=True)
class OboTrace:
    """Chronological record of every paid evaluation in one run."""

    rows: tuple[OboTraceRow, ...]

    COLUMNS = (
        "step",
        "config_index",
        "dataset_index",
        "location",
        "observed_loss",
        "incumbent_meta_loss",
    )

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w") as handle:
            handle.write(",".join(self.COLUMNS) + "\n")
            for row in self.rows:
                handle.write(
                    f"{row.step},{row.config_index},{row.dataset_index},"
                    f"{row.location},{row.observed_loss!r},{row.incumbent_meta_loss!r}\n"
                )


def _portfolio_on(matrix: np.ndarray, members: Iterable[int]) -> Portfolio:
    members = list(members)
    losses = [meta_loss(members[: i + 1], matrix) for i in range(len(members))]
    return Portfolio(members=members, step_losses=losses)


def _update_incumbent(ledger: EvaluationLedger) -> None:
    """Re-run greedy on the clamped table, keeping the old set if better.

    The keep-best guard makes the incumbent's partial meta-loss trace
    non-increasing: clamped cells only ever drop when observed, and a
    re-selected set is only adopted when it is at least as good on the
    current ledger.
    """
    clamped = ledger.clamped_matrix()
    candidate = greedy_select(clamped, min(ledger.k, ledger.n_configs))
    if ledger.current_portfolio is not None:
        previous = _portfolio_on(clamped, ledger.current_portfolio.members)
        if previous.step_losses[-1] < candidate.step_losses[-1]:
            candidate = previous
    ledger.current_portfolio = candidate


def obo_run(
    table: PerformanceTable,
    params: OboParams,
    budget: int,
    log_params: Sequence[str] = (),
) -> tuple[Portfolio, OboTrace]:
    """Sequentially select evaluations of ``table`` under ``budget`` jobs.

    Warm-starts with ``params.warm_start_configs`` random candidates fully
    evaluated, then alternates surrogate refits with one acquisition per
    job.  Stops when the budget is spent or the table fully observed.  The
    returned portfolio is greedy over the candidates that ended up fully
    evaluated, scored on the RED-normalized table; the trace holds one row
    per paid evaluation.
    """
    matrix = selection_matrix(table)
    n, d = matrix.shape
    warm_cost = params.warm_start_configs * d
    if budget < warm_cost:
        raise ValueError(
            f"budget {budget} below warm-start cost {warm_cost} "
            f"({params.warm_start_configs} configs x {d} datasets)"
        )
    if params.K > n:
        raise ValueError(f"K={params.K} exceeds the {n} available configurations")
    if params.warm_start_configs > n:
        raise ValueError("more warm-start configs than candidates")

    rng = np.random.default_rng(params.seed)
    spec = FeatureSpec.from_configs(table.configs, d, log_params=log_params)
    ledger = EvaluationLedger(
        configs=tuple(table.configs),
        n_datasets=d,
        k=params.K,
        budget_total=min(budget, n * d),
    )
    rows: list[OboTraceRow] = []

    def observe(c: int, dd: int, location: int) -> None:
        ledger.observe(c, dd, matrix[c, dd])
        _update_incumbent(ledger)
        rows.append(
            OboTraceRow(
                step=len(rows) + 1,
                config_index=c,
                dataset_index=dd,
                location=location,
                observed_loss=float(matrix[c, dd]),
                incumbent_meta_loss=ledger.current_portfolio.step_losses[-1],
            )
        )

    for c in rng.choice(n, size=params.warm_start_configs, replace=False):
        for dd in range(d):
            observe(int(c), dd, 0)

    while ledger.budget_used < ledger.budget_total and not ledger.all_observed():
        x_rows = np.stack(
            [ledger.cell_features(spec)[c, dd] for (c, dd) in ledger.observed]
        )
        y = np.array(list(ledger.observed.values()))
        model = fit_forest(
            FeatureMatrix(x_rows, spec), y, params.n_trees, int(rng.integers(2**31))
        )
        samples = _pool_samples(ledger, model)
        c, location = acquire_config_location(ledger, model, samples)
        dd = acquire_dataset(ledger, model, c, location, samples)
        observe(c, dd, location)

    complete = ledger.fully_observed()
    chosen = greedy_select(matrix[complete, :], min(params.K, len(complete)))
    portfolio = Portfolio(
        members=[complete[i] for i in chosen.members],
        step_losses=chosen.step_losses,
    )
    return portfolio, OboTrace(rows=tuple(rows))


def naive_run(table: PerformanceTable, budget: int, K: int, seed: int) -> Portfolio:
    """Zero-shot baseline: evaluate floor(budget / D) random configurations
    on every dataset and run greedy selection on that subtable.

    The portfolio is capped at the sample size, so a budget of exactly D
    yields a single-member portfolio.
    """
    matrix = selection_matrix(table)
    n, d = matrix.shape
    if budget < d:
        raise ValueError(f"budget {budget} cannot cover one configuration ({d} jobs)")
    sample_size = min(budget // d, n)
    sampled = np.sort(np.random.default_rng(seed).choice(n, size=sample_size, replace=False))
    chosen = greedy_select(matrix[sampled, :], min(K, sample_size))
    return Portfolio(
        members=[int(sampled[i]) for i in chosen.members],
        step_losses=chosen.step_losses,
    )


def surrogate_baseline_run(
    table: PerformanceTable,
    budget: int,
    K: int,
    seed: int,
    n_trees: int = 100,
    log_params: Sequence[str] = (),
) -> Portfolio:
    """Impute the unevaluated part of the table with per-dataset forests.

    Evaluates floor(budget / D) random configurations everywhere, fits one
    forest per dataset on them (no dataset-id features), predicts every
    remaining cell, and runs greedy on the completed matrix.  The returned
    step losses are re-scored against the true table.
    """
    matrix = selection_matrix(table)
    n, d = matrix.shape
    if budget < d:
        raise ValueError(f"budget {budget} cannot cover one configuration ({d} jobs)")
    if budget > n * d:
        raise ValueError(f"budget {budget} exceeds the table's {n * d} cells")
    rng = np.random.default_rng(seed)
    sample_size = budget // d
    sampled = np.sort(rng.choice(n, size=sample_size, replace=False))
    rest = np.setdiff1d(np.arange(n), sampled)

    completed = np.array(matrix)
    if rest.size:
        spec = FeatureSpec.from_configs(
            table.configs, d, log_params=log_params, include_dataset=False
        )
        x_train = spec.encode_rows([table.configs[i] for i in sampled], 0)
        x_rest = spec.encode_rows([table.configs[i] for i in rest], 0)
        for dd in range(d):
            model = fit_forest(
                x_train, matrix[sampled, dd], n_trees, int(rng.integers(2**31))
            )
            completed[rest, dd] = model.samples_matrix(x_rest).mean(axis=0)

    chosen = greedy_select(completed, min(K, n))
    return _portfolio_on(matrix, chosen.members)
