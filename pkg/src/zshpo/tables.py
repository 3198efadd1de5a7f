"""Benchmark table storage, normalization and synthetic table generation.

A performance table holds validation and test error matrices of shape
(n_configs, n_datasets) together with the hyperparameter settings behind each
row and a small amount of dataset metadata.  All selection code in this
package works on such tables; the on-disk layout is the four-file directory
format described in :func:`load_table`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VAL_FILE = "error_val.csv"
TEST_FILE = "error_test.csv"
CONFIGS_FILE = "configurations.json"
DATASETS_FILE = "datasets.json"

#: Marker used by some released tables for hyperparameters that are inactive
#: in a given configuration (conditional HPs).  Treated as "absent" on load.
ABSENT_MARKER = "--"

NORMALIZATION_SCHEMES = ("none", "rank", "minmax", "stddev", "red")


class TableFormatError(ValueError):
    """Raised when table files are malformed or inconsistent."""


@dataclass(frozen=True)
class ConfigRecord:
    """One hyperparameter configuration (a row of the table)."""

    index: int
    params: dict

    def __post_init__(self):
        for key, value in self.params.items():
            if not isinstance(key, str):
                raise TableFormatError(f"config {self.index}: param name {key!r} is not a string")
            if not isinstance(value, (bool, int, float, str)):
                raise TableFormatError(
                    f"config {self.index}: param {key!r} has unsupported type {type(value).__name__}"
                )


@dataclass(frozen=True)
class DatasetMeta:
    """One dataset (a column of the table)."""

    index: int
    name: str
    source: str = ""


@dataclass(frozen=True, eq=False)
class PerformanceTable:
    """Immutable config-by-dataset error table.

    ``val_loss[i, j]`` / ``test_loss[i, j]`` are the validation and test
    errors of configuration ``i`` on dataset ``j``.  Arrays are float64 and
    marked read-only after construction.
    """

    val_loss: np.ndarray
    test_loss: np.ndarray
    configs: list = field(default_factory=list)
    datasets: list = field(default_factory=list)

    def __post_init__(self):
        val = np.ascontiguousarray(np.asarray(self.val_loss, dtype=np.float64))
        test = np.ascontiguousarray(np.asarray(self.test_loss, dtype=np.float64))
        if val.ndim != 2:
            raise TableFormatError(f"val_loss must be 2-dimensional, got shape {val.shape}")
        if val.shape != test.shape:
            raise TableFormatError(
                f"val/test shape mismatch: {val.shape} vs {test.shape}"
            )
        if val.shape[0] < 1 or val.shape[1] < 1:
            raise TableFormatError(f"table must be at least 1x1, got {val.shape}")
        if not np.all(np.isfinite(val)) or not np.all(np.isfinite(test)):
            raise TableFormatError("loss matrices must be finite")
        if len(self.configs) != val.shape[0]:
            raise TableFormatError(
                f"{len(self.configs)} config records for {val.shape[0]} rows"
            )
        if len(self.datasets) != val.shape[1]:
            raise TableFormatError(
                f"{len(self.datasets)} dataset records for {val.shape[1]} columns"
            )
        val.flags.writeable = False
        test.flags.writeable = False
        object.__setattr__(self, "val_loss", val)
        object.__setattr__(self, "test_loss", test)

    @property
    def n_configs(self) -> int:
        return self.val_loss.shape[0]

    @property
    def n_datasets(self) -> int:
        return self.val_loss.shape[1]


@dataclass(frozen=True, eq=False)
class NormalizedTable:
    """A loss matrix after column-wise normalization.

    ``reference`` is only set for the "red" scheme (the per-dataset reference
    errors the matrix was normalized against).
    """

    scheme: str
    loss: np.ndarray
    reference: np.ndarray | None = None

    def __post_init__(self):
        if self.scheme not in NORMALIZATION_SCHEMES:
            raise ValueError(f"unknown normalization scheme {self.scheme!r}")
        loss = np.ascontiguousarray(np.asarray(self.loss, dtype=np.float64))
        loss.flags.writeable = False
        object.__setattr__(self, "loss", loss)


def _plain_params(index, raw) -> dict:
    """Convert a raw JSON param map: drop absent markers, validate types."""
    if not isinstance(raw, dict):
        raise TableFormatError(f"config {index}: expected an object, got {type(raw).__name__}")
    params = {}
    for key, value in raw.items():
        if value is None or value == ABSENT_MARKER:
            continue  # conditional HP, inactive here
        params[key] = value
    return params


def _read_matrix(path: Path, range_check: bool) -> np.ndarray:
    rows = []
    width = None
    with path.open("r", newline="") as handle:
        for row_no, line in enumerate(handle):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise TableFormatError(
                    f"{path.name}: row {row_no} has {len(cells)} columns, expected {width}"
                )
            parsed = np.empty(len(cells), dtype=np.float64)
            for col_no, cell in enumerate(cells):
                try:
                    parsed[col_no] = float(cell)
                except ValueError:
                    raise TableFormatError(
                        f"{path.name}: row {row_no}, column {col_no}: not a number: {cell!r}"
                    ) from None
            rows.append(parsed)
    if not rows:
        raise TableFormatError(f"{path.name}: empty matrix")
    matrix = np.vstack(rows)
    bad = ~np.isfinite(matrix)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise TableFormatError(f"{path.name}: row {i}, column {j}: non-finite value")
    if range_check:
        out = (matrix < 0.0) | (matrix > 1.0)
        if out.any():
            i, j = np.argwhere(out)[0]
            raise TableFormatError(
                f"{path.name}: row {i}, column {j}: value {matrix[i, j]!r} outside [0, 1] "
                "(pass range_check=False to accept arbitrary losses)"
            )
    return matrix


def _read_indexed_json(path: Path, expected: int) -> list:
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise TableFormatError(f"{path.name}: invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise TableFormatError(f"{path.name}: top level must be an object")
    entries = [None] * expected
    for key, value in raw.items():
        try:
            idx = int(key)
        except ValueError:
            raise TableFormatError(f"{path.name}: key {key!r} is not an index") from None
        if not 0 <= idx < expected:
            raise TableFormatError(f"{path.name}: index {idx} out of range [0, {expected})")
        if entries[idx] is not None:
            raise TableFormatError(f"{path.name}: duplicate index {idx}")
        entries[idx] = value
    missing = [i for i, e in enumerate(entries) if e is None]
    if missing:
        raise TableFormatError(f"{path.name}: missing indices {missing[:5]}")
    return entries


def load_table(path, range_check: bool = True) -> PerformanceTable:
    """Load a table directory.

    The directory must contain ``error_val.csv`` and ``error_test.csv``
    (plain comma-separated numbers, no header, one row per configuration),
    ``configurations.json`` (index -> hyperparameter map; ``null`` and
    ``"--"`` values mean the hyperparameter is inactive) and
    ``datasets.json`` (index -> {name, source}).

    With ``range_check`` (the default) every error must lie in [0, 1], the
    natural range for miss rates.  Disable it for tables holding other loss
    types.
    """
    path = Path(path)
    if not path.is_dir():
        raise TableFormatError(f"not a directory: {path}")
    val = _read_matrix(path / VAL_FILE, range_check)
    test = _read_matrix(path / TEST_FILE, range_check)
    if val.shape != test.shape:
        raise TableFormatError(
            f"{VAL_FILE} is {val.shape[0]}x{val.shape[1]} but {TEST_FILE} is "
            f"{test.shape[0]}x{test.shape[1]}"
        )
    raw_configs = _read_indexed_json(path / CONFIGS_FILE, val.shape[0])
    configs = [ConfigRecord(i, _plain_params(i, raw)) for i, raw in enumerate(raw_configs)]
    raw_datasets = _read_indexed_json(path / DATASETS_FILE, val.shape[1])
    datasets = []
    for i, raw in enumerate(raw_datasets):
        if not isinstance(raw, dict) or "name" not in raw:
            raise TableFormatError(f"{DATASETS_FILE}: entry {i} must be an object with a name")
        datasets.append(DatasetMeta(i, str(raw["name"]), str(raw.get("source", ""))))
    return PerformanceTable(val, test, configs, datasets)


def save_table(table: PerformanceTable, path) -> None:
    """Write ``table`` as a table directory (inverse of :func:`load_table`).

    Floats are written with ``repr``, the shortest decimal form that parses
    back to the identical float64, so a save/load round trip is bit exact.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, matrix in ((VAL_FILE, table.val_loss), (TEST_FILE, table.test_loss)):
        with (path / name).open("w", newline="") as handle:
            for row in matrix:
                handle.write(",".join(repr(float(x)) for x in row))
                handle.write("\n")
    configs_obj = {str(c.index): c.params for c in table.configs}
    datasets_obj = {
        str(d.index): {"name": d.name, "source": d.source} for d in table.datasets
    }
    (path / CONFIGS_FILE).write_text(json.dumps(configs_obj, indent=2) + "\n")
    (path / DATASETS_FILE).write_text(json.dumps(datasets_obj, indent=2) + "\n")


# ---------------------------------------------------------------------------
# synthetic tables

_BOOSTERS = ("dart", "gbdt", "goss")


def synth_table(
    n_configs: int,
    n_datasets: int,
    planted_k: int,
    noise: float = 0.0,
    seed: int = 0,
) -> PerformanceTable:
    """Generate a table with ``planted_k`` planted specialist configurations.

    The datasets are partitioned into ``planted_k`` disjoint clusters with
    geometrically decaying sizes (the first cluster holds about half the
    datasets) and each specialist gets validation error in
    [0.05, 0.05 + noise] on its own cluster and in [0.85, 0.95] elsewhere.  Every other configuration is
    mediocre everywhere: its error on a dataset is drawn from [0.45, 0.55]
    and then lowered by up to 0.08 in proportion to how close the
    configuration sits to that cluster's specialist in hyperparameter space,
    so mediocre errors land in [0.37, 0.55].  The tilt keeps the loss
    surface a (weakly) learnable function of the hyperparameters, the way
    neighbouring configurations behave similarly on real tables, without
    disturbing the plant: for ``noise < 0.32`` the unique optimal portfolio
    of size ``planted_k`` is still exactly the specialist set, because any
    portfolio missing a specialist pays at least 0.37 on that specialist's
    cluster.  Test errors are the validation errors plus 0.01 * N(0, 1)
    jitter, clipped to [0, 1].

    Configurations carry a small synthetic search space (log-uniform ``lr``,
    integer ``depth``, float ``subsample``, categorical ``booster``, boolean
    ``bagging``) so encoder paths can be exercised on generated tables.
    Deterministic for a fixed seed.
    """
    if n_configs < 1 or n_datasets < 1:
        raise ValueError("table must be at least 1x1")
    if not 1 <= planted_k <= min(n_configs, n_datasets):
        raise ValueError(
            f"planted_k must be in [1, min(n_configs, n_datasets)], got {planted_k}"
        )
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = np.random.default_rng(seed)

    lr_exp = rng.uniform(-4.0, 0.0, n_configs)
    depth = rng.integers(2, 13, n_configs)
    subsample = rng.uniform(0.5, 1.0, n_configs)
    booster = rng.integers(0, len(_BOOSTERS), n_configs)
    bagging = rng.integers(0, 2, n_configs)

    specialists = rng.choice(n_configs, size=planted_k, replace=False)
    dataset_perm = rng.permutation(n_datasets)
    # Geometrically decaying cluster sizes (largest-remainder rounding, at
    # least one dataset each): real dataset collections cluster unevenly,
    # and a dominant cluster keeps small portfolios informative.
    weights = 0.5 ** np.arange(planted_k)
    weights /= weights.sum()
    sizes = np.maximum(1, np.floor(weights * n_datasets).astype(int))
    while sizes.sum() > n_datasets:
        sizes[int(np.argmax(sizes))] -= 1
    remainders = weights * n_datasets - sizes
    while sizes.sum() < n_datasets:
        order = np.argsort(-remainders)
        sizes[order[0]] += 1
        remainders[order[0]] = -np.inf
    clusters = []
    start = 0
    for i in range(planted_k):
        clusters.append(dataset_perm[start : start + int(sizes[i])])
        start += int(sizes[i])

    # Numeric coordinates rescaled to [0, 1] for the affinity kernel.
    coords = np.stack(
        [(lr_exp + 4.0) / 4.0, (depth - 2) / 10.0, (subsample - 0.5) / 0.5],
        axis=1,
    )
    sq_dist = ((coords[:, None, :] - coords[None, specialists, :]) ** 2).sum(axis=2)
    affinity = np.exp(-sq_dist / (2 * 0.35**2))  # (n_configs, planted_k)

    val = 0.45 + 0.1 * rng.random((n_configs, n_datasets))
    for i, (spec, cluster) in enumerate(zip(specialists, clusters)):
        val[:, cluster] -= 0.08 * affinity[:, i][:, None]
    for spec, cluster in zip(specialists, clusters):
        val[spec, :] = 0.85 + 0.1 * rng.random(n_datasets)
        val[spec, cluster] = 0.05 + noise * rng.random(len(cluster))
    val = np.clip(val, 0.0, 1.0)
    test = np.clip(val + 0.01 * rng.standard_normal(val.shape), 0.0, 1.0)

    configs = []
    for i in range(n_configs):
        params = {
            "lr": float(10.0 ** lr_exp[i]),
            "depth": int(depth[i]),
            "subsample": float(subsample[i]),
            "booster": _BOOSTERS[booster[i]],
            "bagging": bool(bagging[i]),
        }
        configs.append(ConfigRecord(i, params))
    datasets = [DatasetMeta(j, f"synth-{j}", "synthetic") for j in range(n_datasets)]
    return PerformanceTable(val, test, configs, datasets)


#: Hyperparameters of the synthetic search space drawn log-uniformly, for
#: passing as ``log_params`` to the encoder.
SYNTH_LOG_PARAMS = ("lr",)


# ---------------------------------------------------------------------------
# reference losses and normalization


def reference_losses(table: PerformanceTable, top_m: int = 10) -> np.ndarray:
    """Per-dataset reference error: mean test error of the ``top_m`` configs
    with the lowest validation error on that dataset (validation ties go to
    the lower config index).  Tables with fewer than ``top_m`` rows use all
    rows."""
    if top_m < 1:
        raise ValueError("top_m must be at least 1")
    m = min(top_m, table.n_configs)
    refs = np.empty(table.n_datasets, dtype=np.float64)
    for j in range(table.n_datasets):
        order = np.argsort(table.val_loss[:, j], kind="stable")[:m]
        refs[j] = float(np.mean(table.test_loss[order, j]))
    return refs


def red(a, b):
    """Relative error difference ``(a - b) / max(a, b)`` with 0/0 defined
    as 0.

    Accepts scalars or arrays (broadcasting like numpy).  Inputs must be
    finite and non-negative; the result is in [-1, 1], negative when ``a``
    is the smaller error.  Equal relative improvements score equally
    regardless of scale: ``red(0.03, 0.04) == red(0.30, 0.40)``.
    """
    a_arr = np.asarray(a, dtype=np.float64)
    b_arr = np.asarray(b, dtype=np.float64)
    if not (np.all(np.isfinite(a_arr)) and np.all(np.isfinite(b_arr))):
        raise ValueError("red() requires finite inputs")
    if np.any(a_arr < 0) or np.any(b_arr < 0):
        raise ValueError("red() requires non-negative errors")
    denom = np.maximum(a_arr, b_arr)
    safe = np.where(denom == 0.0, 1.0, denom)
    out = np.where(denom == 0.0, 0.0, (a_arr - b_arr) / safe)
    if a_arr.ndim == 0 and b_arr.ndim == 0:
        return float(out)
    return out


def _rank_column(col: np.ndarray) -> np.ndarray:
    # fraction of strictly smaller entries; ties share a rank
    order = np.sort(col)
    return np.searchsorted(order, col, side="left") / col.shape[0]


def normalize(
    table: PerformanceTable,
    scheme: str,
    reference: np.ndarray | None = None,
    which: str = "val",
) -> NormalizedTable:
    """Normalize one loss matrix of ``table`` column by column.

    Schemes:

    * ``none``: identity.
    * ``rank``: fraction of configs strictly better on the dataset, in [0, 1).
    * ``minmax``: affine map of the column onto [0, 1]; constant columns
      become all zeros.
    * ``stddev``: zero mean, unit standard deviation; constant columns become
      all zeros.
    * ``red``: :func:`red` against the per-dataset ``reference`` errors
      (required for this scheme, see :func:`reference_losses`).

    ``which`` selects the validation ("val") or test ("test") matrix.
    """
    if scheme not in NORMALIZATION_SCHEMES:
        raise ValueError(f"unknown normalization scheme {scheme!r}")
    if which == "val":
        matrix = table.val_loss
    elif which == "test":
        matrix = table.test_loss
    else:
        raise ValueError(f"which must be 'val' or 'test', got {which!r}")

    if scheme == "none":
        return NormalizedTable(scheme, matrix.copy())
    if scheme == "rank":
        out = np.column_stack([_rank_column(matrix[:, j]) for j in range(matrix.shape[1])])
        return NormalizedTable(scheme, out)
    if scheme == "minmax":
        lo = matrix.min(axis=0)
        span = matrix.max(axis=0) - lo
        safe = np.where(span == 0.0, 1.0, span)
        out = np.where(span == 0.0, 0.0, (matrix - lo) / safe)
        return NormalizedTable(scheme, out)
    if scheme == "stddev":
        # key the degenerate case on exact constancy, not std == 0: summing a
        # constant column can drift the mean by an ulp and leave std tiny but
        # positive
        constant = matrix.max(axis=0) == matrix.min(axis=0)
        mean = matrix.mean(axis=0)
        std = matrix.std(axis=0)
        safe = np.where(constant, 1.0, std)
        out = np.where(constant, 0.0, (matrix - mean) / safe)
        return NormalizedTable(scheme, out)
    # red
    if reference is None:
        raise ValueError("scheme 'red' needs per-dataset reference losses")
    reference = np.asarray(reference, dtype=np.float64)
    if reference.shape != (matrix.shape[1],):
        raise ValueError(
            f"reference must have shape ({matrix.shape[1]},), got {reference.shape}"
        )
    out = red(matrix, reference[np.newaxis, :])
    return NormalizedTable(scheme, out, reference=reference)


def selection_matrix(table: PerformanceTable, scheme: str = "red") -> np.ndarray:
    """The validation-loss matrix every selection method optimizes over.

    For the default "red" scheme the reference losses are computed from
    ``table`` itself; selection never sees data outside the table it is
    given.
    """
    if scheme == "red":
        return normalize(table, "red", reference_losses(table)).loss
    return normalize(table, scheme).loss


def drop_dataset(table: PerformanceTable, index: int) -> PerformanceTable:
    """Return ``table`` without dataset column ``index`` (for hold-out
    evaluation).  Config rows keep their indices; the remaining datasets are
    reindexed positionally but keep their names."""
    if not 0 <= index < table.n_datasets:
        raise ValueError(f"dataset index {index} out of range")
    keep = [j for j in range(table.n_datasets) if j != index]
    datasets = [
        DatasetMeta(pos, table.datasets[j].name, table.datasets[j].source)
        for pos, j in enumerate(keep)
    ]
    return PerformanceTable(
        table.val_loss[:, keep], table.test_loss[:, keep], list(table.configs), datasets
    )
