"""Random-forest surrogate over (configuration, dataset) pairs.

The model is a bagged ensemble of fully grown CART regression trees written
against a flat-array tree representation and compiled with numba.  Individual
tree predictions double as approximate posterior samples, which is all the
acquisition logic ever asks of the model.

Configurations are encoded into dense feature rows by :class:`FeatureSpec`:
numeric hyperparameters pass through (log-transformed when declared
log-uniform), booleans become 0/1, categoricals are one-hot encoded over the
observed vocabulary, and conditional hyperparameters that are absent from
some configurations get a trailing presence indicator.  The dataset identity
is appended as a one-hot block, or omitted entirely for per-dataset models.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numba import njit

from .tables import ConfigRecord

SERIAL_VERSION = 1


# ---------------------------------------------------------------------------
# feature encoding


@dataclass(frozen=True)
class HpColumn:
    """Encoding recipe for one hyperparameter.

    ``kind`` is "numeric", "bool" or "categorical".  ``vocab`` is the sorted
    categorical vocabulary (empty otherwise).  ``conditional`` marks
    hyperparameters missing from at least one configuration; these get one
    extra presence-indicator column after their value columns.
    """

    name: str
    kind: str
    vocab: tuple[str, ...] = ()
    log: bool = False
    conditional: bool = False

    @property
    def width(self) -> int:
        base = len(self.vocab) if self.kind == "categorical" else 1
        return base + (1 if self.conditional else 0)


@dataclass(frozen=True)
class FeatureSpec:
    """Deterministic mapping from (config params, dataset id) to a row."""

    columns: tuple[HpColumn, ...]
    n_datasets: int
    include_dataset: bool = True

    @property
    def n_features(self) -> int:
        width = sum(c.width for c in self.columns)
        if self.include_dataset:
            width += self.n_datasets
        return width

    @classmethod
    def from_configs(
        cls,
        configs: Sequence[ConfigRecord],
        n_datasets: int,
        log_params: Sequence[str] = (),
        include_dataset: bool = True,
    ) -> "FeatureSpec":
        """Infer the encoding from the hyperparameters actually observed.

        Hyperparameter columns are emitted in sorted name order.  A name
        present in only some configurations is treated as conditional.
        """
        if n_datasets < 1:
            raise ValueError("n_datasets must be positive")
        if not configs:
            raise ValueError("cannot infer an encoding from zero configurations")
        values: dict[str, list] = {}
        for record in configs:
            for name, val in record.params.items():
                values.setdefault(name, []).append(val)
        unknown_log = set(log_params) - set(values)
        if unknown_log:
            raise ValueError(f"log_params name unknown hyperparameters: {sorted(unknown_log)}")

        columns = []
        for name in sorted(values):
            seen = values[name]
            conditional = len(seen) < len(configs)
            if all(isinstance(v, bool) for v in seen):
                kind, vocab = "bool", ()
            elif all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in seen):
                kind, vocab = "numeric", ()
            elif all(isinstance(v, str) for v in seen):
                kind, vocab = "categorical", tuple(sorted(set(seen)))
            else:
                raise ValueError(f"hyperparameter {name!r} mixes value types")
            log = name in log_params
            if log and kind != "numeric":
                raise ValueError(f"log-uniform hyperparameter {name!r} is not numeric")
            if log and any(v <= 0 for v in seen):
                raise ValueError(f"log-uniform hyperparameter {name!r} has non-positive values")
            columns.append(HpColumn(name, kind, vocab, log, conditional))
        return cls(tuple(columns), n_datasets, include_dataset)

    def encode_one(self, params: Mapping[str, object], dataset_id: int) -> np.ndarray:
        unknown = set(params) - {c.name for c in self.columns}
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        if self.include_dataset and not 0 <= dataset_id < self.n_datasets:
            raise ValueError(
                f"dataset_id {dataset_id} out of range for {self.n_datasets} datasets"
            )
        row = np.zeros(self.n_features)
        pos = 0
        for col in self.columns:
            present = col.name in params
            if not present and not col.conditional:
                raise ValueError(f"hyperparameter {col.name!r} missing and not conditional")
            if present:
                val = params[col.name]
                if col.kind == "numeric":
                    if not isinstance(val, (int, float)) or isinstance(val, bool):
                        raise ValueError(f"hyperparameter {col.name!r} expects a number")
                    row[pos] = math.log(val) if col.log else float(val)
                elif col.kind == "bool":
                    if not isinstance(val, bool):
                        raise ValueError(f"hyperparameter {col.name!r} expects a boolean")
                    row[pos] = 1.0 if val else 0.0
                else:
                    if val not in col.vocab:
                        raise ValueError(
                            f"unknown value {val!r} for hyperparameter {col.name!r}; "
                            f"vocabulary {list(col.vocab)}"
                        )
                    row[pos + col.vocab.index(val)] = 1.0
            if col.conditional:
                row[pos + col.width - 1] = 1.0 if present else 0.0
            pos += col.width
        if self.include_dataset:
            row[pos + dataset_id] = 1.0
        return row

    def encode_rows(
        self, configs: Sequence[ConfigRecord], dataset_id: int
    ) -> np.ndarray:
        return np.stack([self.encode_one(c.params, dataset_id) for c in configs])


@dataclass(frozen=True)
class FeatureMatrix:
    """Encoded observations plus the spec that produced them."""

    values: np.ndarray
    spec: FeatureSpec

    def __post_init__(self) -> None:
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("feature matrix must be 2-d")
        if not np.all(np.isfinite(values)):
            raise ValueError("feature matrix contains non-finite values")
        if values.shape[1] != self.spec.n_features:
            raise ValueError(
                f"row width {values.shape[1]} does not match spec width "
                f"{self.spec.n_features}"
            )
        object.__setattr__(self, "values", values)


def encode(
    configs: Sequence[ConfigRecord],
    dataset_id: int,
    n_datasets: int,
    spec: FeatureSpec | None = None,
    log_params: Sequence[str] = (),
) -> FeatureMatrix:
    """Encode ``configs`` at one dataset into a :class:`FeatureMatrix`.

    Without an explicit ``spec`` the encoding is inferred from ``configs``
    themselves; pass the same spec across calls when rows from several calls
    must share a column layout.
    """
    if spec is None:
        spec = FeatureSpec.from_configs(configs, n_datasets, log_params=log_params)
    return FeatureMatrix(spec.encode_rows(configs, dataset_id), spec)


# ---------------------------------------------------------------------------
# tree growing and prediction kernels


@njit(cache=True)
def _grow(X, y, sidx, feature, threshold, left, right, value):  # pragma: no cover
    """Grow one CART tree over presorted row indices.

    ``sidx`` has shape (n_features, n); row f holds a stable argsort of
    X[:, f] and is repartitioned in place as nodes split.  Returns the number
    of nodes written into the flat node arrays.
    """
    n = X.shape[0]
    n_feat = X.shape[1]
    stack_node = np.empty(2 * n + 1, np.int64)
    stack_lo = np.empty(2 * n + 1, np.int64)
    stack_hi = np.empty(2 * n + 1, np.int64)
    goes_left = np.empty(n, np.uint8)
    buf = np.empty(n, np.int64)
    top = 0
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = n
    n_nodes = 1
    while top >= 0:
        node = stack_node[top]
        lo = stack_lo[top]
        hi = stack_hi[top]
        top -= 1
        m = hi - lo
        s = 0.0
        q = 0.0
        for i in range(lo, hi):
            yy = y[sidx[0, i]]
            s += yy
            q += yy * yy
        mean = s / m
        var = q - s * s / m
        if m < 2 or var <= 0.0:
            feature[node] = -1
            value[node] = mean
            continue
        best_sse = np.inf
        best_f = -1
        best_t = 0.0
        best_nl = 0
        for f in range(n_feat):
            sl = 0.0
            ql = 0.0
            for i in range(lo, hi - 1):
                r = sidx[f, i]
                yy = y[r]
                sl += yy
                ql += yy * yy
                v = X[r, f]
                nxt = X[sidx[f, i + 1], f]
                if nxt <= v:
                    continue
                nl = i + 1 - lo
                nr = m - nl
                sr = s - sl
                qr = q - ql
                sse = (ql - sl * sl / nl) + (qr - sr * sr / nr)
                if sse < best_sse:
                    best_sse = sse
                    best_f = f
                    # midpoint, nudged down to the left value when rounding
                    # would land it on the right neighbour
                    t = 0.5 * (v + nxt)
                    if t >= nxt:
                        t = v
                    best_t = t
                    best_nl = nl
        if best_f < 0:
            feature[node] = -1
            value[node] = mean
            continue
        for i in range(lo, hi):
            r = sidx[0, i]
            goes_left[r] = 1 if X[r, best_f] <= best_t else 0
        # stable partition of every feature's sorted slice, so children stay
        # presorted without re-sorting
        for f in range(n_feat):
            a = lo
            b = 0
            for i in range(lo, hi):
                r = sidx[f, i]
                if goes_left[r]:
                    sidx[f, a] = r
                    a += 1
                else:
                    buf[b] = r
                    b += 1
            for i in range(b):
                sidx[f, a + i] = buf[i]
        mid = lo + best_nl
        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_t
        left[node] = lid
        right[node] = rid
        top += 1
        stack_node[top] = rid
        stack_lo[top] = mid
        stack_hi[top] = hi
        top += 1
        stack_node[top] = lid
        stack_lo[top] = lo
        stack_hi[top] = mid
    return n_nodes


@njit(cache=True)
def _predict_forest(Xq, feature, threshold, left, right, value, offsets, out):  # pragma: no cover
    """Per-tree predictions for every query row: out has shape (trees, rows)."""
    n_trees = offsets.shape[0] - 1
    nq = Xq.shape[0]
    for t in range(n_trees):
        base = offsets[t]
        for i in range(nq):
            node = 0
            while feature[base + node] >= 0:
                if Xq[i, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            out[t, i] = value[base + node]


# ---------------------------------------------------------------------------
# forest model


@dataclass(frozen=True)
class ForestModel:
    """A fitted ensemble in flat-array form.

    Node arrays of all trees are concatenated; ``offsets[t]`` is the start of
    tree ``t`` and child indices are local to their tree.  Internal nodes
    have ``feature >= 0``; leaves store the training-target mean in
    ``value``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    offsets: np.ndarray
    n_features: int
    seed: int
    spec: FeatureSpec | None = field(default=None, compare=False)

    @property
    def n_trees(self) -> int:
        return self.offsets.shape[0] - 1

    def samples_matrix(self, X: np.ndarray) -> np.ndarray:
        """Per-tree predictions for a batch of rows, shape (n_trees, rows)."""
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(
                f"query must be 2-d with {self.n_features} columns, got shape {X.shape}"
            )
        out = np.empty((self.n_trees, X.shape[0]))
        _predict_forest(
            X, self.feature, self.threshold, self.left, self.right, self.value,
            self.offsets, out,
        )
        return out

    def to_json(self) -> str:
        trees = []
        for t in range(self.n_trees):
            lo, hi = int(self.offsets[t]), int(self.offsets[t + 1])
            trees.append(
                {
                    "feature": self.feature[lo:hi].tolist(),
                    "threshold": self.threshold[lo:hi].tolist(),
                    "left": self.left[lo:hi].tolist(),
                    "right": self.right[lo:hi].tolist(),
                    "value": self.value[lo:hi].tolist(),
                }
            )
        payload = {
            "version": SERIAL_VERSION,
            "n_features": self.n_features,
            "seed": self.seed,
            "trees": trees,
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "ForestModel":
        payload = json.loads(text)
        if payload.get("version") != SERIAL_VERSION:
            raise ValueError(f"unsupported forest serialization: {payload.get('version')!r}")
        parts = {k: [] for k in ("feature", "threshold", "left", "right", "value")}
        offsets = [0]
        for tree in payload["trees"]:
            for k in parts:
                parts[k].extend(tree[k])
            offsets.append(offsets[-1] + len(tree["feature"]))
        return cls(
            feature=np.array(parts["feature"], np.int64),
            threshold=np.array(parts["threshold"]),
            left=np.array(parts["left"], np.int64),
            right=np.array(parts["right"], np.int64),
            value=np.array(parts["value"]),
            offsets=np.array(offsets, np.int64),
            n_features=int(payload["n_features"]),
            seed=int(payload["seed"]),
        )


def fit_forest(X, y, n_trees: int, seed: int) -> ForestModel:
    """Fit a bagged forest of fully grown CART trees.

    Each tree trains on a bootstrap resample (with replacement, original
    size) of the rows and splits greedily by sum of squared errors over
    midpoints of adjacent distinct feature values, lowest feature index then
    lowest threshold on ties.  Everything is deterministic given ``seed``.
    """
    spec = None
    if isinstance(X, FeatureMatrix):
        spec = X.spec
        X = X.values
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValueError(f"incompatible shapes {X.shape} and {y.shape}")
    n = X.shape[0]
    if n < 1:
        raise ValueError("cannot fit a forest on an empty training set")
    if n_trees < 1:
        raise ValueError("n_trees must be positive")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("training data must be finite")

    rng = np.random.default_rng(seed)
    bootstrap = rng.integers(0, n, size=(n_trees, n))
    cap = 2 * n + 1
    feature = np.empty(cap, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    sidx = np.empty((X.shape[1], n), np.int64)

    chunks = {k: [] for k in ("feature", "threshold", "left", "right", "value")}
    offsets = [0]
    for t in range(n_trees):
        Xb = np.ascontiguousarray(X[bootstrap[t]])
        yb = np.ascontiguousarray(y[bootstrap[t]])
        for f in range(X.shape[1]):
            sidx[f] = np.argsort(Xb[:, f], kind="stable")
        n_nodes = _grow(Xb, yb, sidx, feature, threshold, left, right, value)
        chunks["feature"].append(feature[:n_nodes].copy())
        chunks["threshold"].append(threshold[:n_nodes].copy())
        chunks["left"].append(left[:n_nodes].copy())
        chunks["right"].append(right[:n_nodes].copy())
        chunks["value"].append(value[:n_nodes].copy())
        offsets.append(offsets[-1] + n_nodes)
    return ForestModel(
        feature=np.concatenate(chunks["feature"]),
        threshold=np.concatenate(chunks["threshold"]),
        left=np.concatenate(chunks["left"]),
        right=np.concatenate(chunks["right"]),
        value=np.concatenate(chunks["value"]),
        offsets=np.array(offsets, np.int64),
        n_features=X.shape[1],
        seed=seed,
        spec=spec,
    )


def predict_samples(model: ForestModel, x) -> np.ndarray:
    """The ensemble's per-tree predictions for one feature row.

    The vector doubles as approximate posterior samples for acquisition."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("predict_samples takes a single feature row")
    return model.samples_matrix(x[np.newaxis, :])[:, 0]


def predict_mean(model: ForestModel, x) -> float:
    """Ensemble prediction: the mean over per-tree predictions."""
    return float(predict_samples(model, x).mean())
