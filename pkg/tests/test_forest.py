from __future__ import annotations

import math

import numpy as np
import pytest

from zshpo.forest import (
    FeatureMatrix,
    FeatureSpec,
    ForestModel,
    encode,
    fit_forest,
    predict_mean,
    predict_samples,
)
from zshpo.tables import ConfigRecord, synth_table

# ---------------------------------------------------------------------------
# encoding


def test_encode_worked_example():
    configs = [ConfigRecord(0, {"lr": 0.01, "use_dropout": True})]
    fm = encode(configs, 1, 3, log_params=("lr",))
    assert np.allclose(fm.values[0], [math.log(0.01), 1.0, 0.0, 1.0, 0.0])


def test_encode_pure():
    configs = [
        ConfigRecord(0, {"lr": 0.1, "opt": "adam"}),
        ConfigRecord(1, {"lr": 0.1, "opt": "adam"}),
    ]
    fm = encode(configs, 0, 2)
    assert np.array_equal(fm.values[0], fm.values[1])


def test_encode_categorical_sorted_vocab():
    configs = [
        ConfigRecord(0, {"booster": "gbdt"}),
        ConfigRecord(1, {"booster": "dart"}),
        ConfigRecord(2, {"booster": "goss"}),
    ]
    spec = FeatureSpec.from_configs(configs, 1)
    assert spec.columns[0].vocab == ("dart", "gbdt", "goss")
    fm = encode(configs, 0, 1, spec=spec)
    assert np.array_equal(fm.values[:, :3], np.eye(3)[[1, 0, 2]])


def test_encode_conditional_presence_indicator():
    configs = [
        ConfigRecord(0, {"units": 64, "lr": 0.1}),
        ConfigRecord(1, {"lr": 0.2}),
    ]
    spec = FeatureSpec.from_configs(configs, 2)
    # columns in sorted name order: lr (1 col), units (value + presence)
    assert spec.n_features == 1 + 2 + 2
    active = spec.encode_one(configs[0].params, 0)
    inactive = spec.encode_one(configs[1].params, 0)
    assert active[1] == 64.0 and active[2] == 1.0
    assert inactive[1] == 0.0 and inactive[2] == 0.0


def test_encode_unknown_hyperparameter_rejected():
    spec = FeatureSpec.from_configs([ConfigRecord(0, {"lr": 0.1})], 1)
    with pytest.raises(ValueError, match="unknown hyperparameters"):
        spec.encode_one({"lr": 0.1, "momentum": 0.9}, 0)


def test_encode_unknown_category_rejected():
    spec = FeatureSpec.from_configs([ConfigRecord(0, {"opt": "sgd"})], 1)
    with pytest.raises(ValueError, match="unknown value"):
        spec.encode_one({"opt": "adam"}, 0)


def test_encode_dataset_out_of_range():
    spec = FeatureSpec.from_configs([ConfigRecord(0, {"lr": 0.1})], 3)
    with pytest.raises(ValueError):
        spec.encode_one({"lr": 0.1}, 3)


def test_encode_injective_over_config_dataset_pairs():
    table = synth_table(10, 4, 2, seed=2)
    spec = FeatureSpec.from_configs(table.configs, 4, log_params=("lr",))
    rows = np.vstack([spec.encode_rows(table.configs, d) for d in range(4)])
    assert len(np.unique(rows, axis=0)) == rows.shape[0]


def test_encode_per_dataset_variant_drops_dataset_block():
    configs = [ConfigRecord(0, {"lr": 0.1}), ConfigRecord(1, {"lr": 0.2})]
    full = FeatureSpec.from_configs(configs, 5)
    bare = FeatureSpec.from_configs(configs, 5, include_dataset=False)
    assert full.n_features == bare.n_features + 5
    assert np.array_equal(bare.encode_rows(configs, 0), bare.encode_rows(configs, 3))


def test_encode_mixed_types_rejected():
    configs = [ConfigRecord(0, {"opt": "sgd"}), ConfigRecord(1, {"opt": 3})]
    with pytest.raises(ValueError, match="mixes value types"):
        FeatureSpec.from_configs(configs, 1)


def test_log_param_validation():
    configs = [ConfigRecord(0, {"lr": 0.0})]
    with pytest.raises(ValueError, match="non-positive"):
        FeatureSpec.from_configs(configs, 1, log_params=("lr",))
    with pytest.raises(ValueError, match="unknown hyperparameters"):
        FeatureSpec.from_configs(configs, 1, log_params=("depth",))


def test_feature_matrix_validates_width():
    spec = FeatureSpec.from_configs([ConfigRecord(0, {"lr": 0.1})], 2)
    with pytest.raises(ValueError):
        FeatureMatrix(np.zeros((2, 7)), spec)


# ---------------------------------------------------------------------------
# reference implementation for tree growing
#
# A recursive CART with the same split objective, stopping rule and
# tie-breaking as the compiled kernel.  Targets in the comparison tests are
# multiples of 1/8, so every sum of squares below is exact in binary floating
# point and agreement must be bit for bit.


def oracle_tree(X: np.ndarray, y: np.ndarray):
    m = len(y)
    s = float(np.sum(y))
    q = float(np.sum(y * y))
    mean = s / m
    var = q - s * s / m
    if m < 2 or var <= 0.0:
        return ("leaf", mean)
    best = None
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        sl = 0.0
        ql = 0.0
        for i in range(m - 1):
            r = order[i]
            sl += y[r]
            ql += y[r] * y[r]
            v = X[r, f]
            nxt = X[order[i + 1], f]
            if nxt <= v:
                continue
            nl = i + 1
            nr = m - nl
            sr = s - sl
            qr = q - ql
            sse = (ql - sl * sl / nl) + (qr - sr * sr / nr)
            if best is None or sse < best[0]:
                t = 0.5 * (v + nxt)
                if t >= nxt:
                    t = v
                best = (sse, f, t)
    if best is None:
        return ("leaf", mean)
    _, f, t = best
    mask = X[:, f] <= t
    return ("split", f, t, oracle_tree(X[mask], y[mask]), oracle_tree(X[~mask], y[~mask]))


def oracle_predict(tree, x: np.ndarray) -> float:
    while tree[0] == "split":
        _, f, t, left, right = tree
        tree = left if x[f] <= t else right
    return tree[1]


def test_single_tree_matches_reference_on_many_fixtures():
    for case in range(40):
        rng = np.random.default_rng(1000 + case)
        n = int(rng.integers(2, 30))
        d = int(rng.integers(1, 6))
        X = rng.random((n, d))
        y = rng.integers(0, 17, n) / 8.0
        model = fit_forest(X, y, n_trees=1, seed=case)
        rows = np.random.default_rng(case).integers(0, n, size=(1, n))[0]
        ref = oracle_tree(X[rows], y[rows])
        queries = rng.random((50, d))
        got = model.samples_matrix(queries)[0]
        want = np.array([oracle_predict(ref, x) for x in queries])
        assert np.array_equal(got, want), f"fixture {case} diverged"


def test_forest_is_average_of_independent_trees():
    rng = np.random.default_rng(5)
    X = rng.random((25, 3))
    y = rng.integers(0, 9, 25) / 8.0
    model = fit_forest(X, y, n_trees=7, seed=9)
    x = rng.random(3)
    samples = predict_samples(model, x)
    assert samples.shape == (7,)
    assert predict_mean(model, x) == pytest.approx(samples.mean())
    # tree t of a 7-tree forest uses the t-th row of the seeded bootstrap
    # block, so single trees are reproducible in isolation
    boot = np.random.default_rng(9).integers(0, 25, size=(7, 25))
    ref = oracle_tree(X[boot[3]], y[boot[3]])
    assert samples[3] == oracle_predict(ref, x)


# ---------------------------------------------------------------------------
# degenerate and invariant behaviour


def test_constant_target_predicts_constant():
    # 0.375 is exactly representable, so the leaf mean is exact too
    X = np.random.default_rng(0).random((10, 2))
    model = fit_forest(X, np.full(10, 0.375), n_trees=5, seed=1)
    out = model.samples_matrix(np.random.default_rng(1).random((20, 2)))
    assert np.all(out == 0.375)


def test_single_row_training_set():
    model = fit_forest(np.array([[1.0, 2.0]]), np.array([0.6]), n_trees=3, seed=0)
    assert np.all(model.samples_matrix(np.array([[5.0, -1.0]])) == 0.6)


def test_binary_cluster_example():
    rng = np.random.default_rng(6)
    flag = np.repeat([0.0, 1.0], 20)
    y = flag + rng.normal(0, 0.01, 40)
    model = fit_forest(flag[:, np.newaxis], y, n_trees=20, seed=2)
    preds = model.samples_matrix(flag[:, np.newaxis]).mean(axis=0)
    assert np.all(np.abs(preds[:20] - 0.0) < 0.05)
    assert np.all(np.abs(preds[20:] - 1.0) < 0.05)


def test_predictions_bounded_by_target_range():
    rng = np.random.default_rng(12)
    X = rng.random((60, 4))
    y = rng.uniform(-3, 5, 60)
    model = fit_forest(X, y, n_trees=10, seed=3)
    out = model.samples_matrix(rng.random((100, 4)))
    assert out.min() >= y.min() and out.max() <= y.max()


def test_training_mse_beats_target_variance():
    rng = np.random.default_rng(7)
    X = rng.random((80, 3))
    y = np.sin(3 * X[:, 0]) + 0.5 * X[:, 1] + rng.normal(0, 0.05, 80)
    model = fit_forest(X, y, n_trees=100, seed=4)
    preds = model.samples_matrix(X).mean(axis=0)
    assert np.mean((preds - y) ** 2) <= y.var()


def test_per_tree_predictions_vary_on_distinct_rows():
    rng = np.random.default_rng(8)
    X = rng.random((40, 3))
    y = rng.random(40)
    model = fit_forest(X, y, n_trees=20, seed=5)
    assert model.samples_matrix(X).var(axis=0).max() > 0


def test_determinism_and_seed_sensitivity():
    rng = np.random.default_rng(9)
    X, y = rng.random((30, 3)), rng.random(30)
    q = rng.random((10, 3))
    a = fit_forest(X, y, n_trees=8, seed=11).samples_matrix(q)
    b = fit_forest(X, y, n_trees=8, seed=11).samples_matrix(q)
    c = fit_forest(X, y, n_trees=8, seed=12).samples_matrix(q)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_fit_validation():
    with pytest.raises(ValueError):
        fit_forest(np.zeros((0, 2)), np.zeros(0), n_trees=1, seed=0)
    with pytest.raises(ValueError):
        fit_forest(np.zeros((3, 2)), np.zeros(4), n_trees=1, seed=0)
    with pytest.raises(ValueError):
        fit_forest(np.zeros((3, 2)), np.zeros(3), n_trees=0, seed=0)
    with pytest.raises(ValueError):
        fit_forest(np.full((3, 2), np.nan), np.zeros(3), n_trees=1, seed=0)


def test_predict_dimension_mismatch():
    model = fit_forest(np.random.default_rng(0).random((10, 3)), np.arange(10.0), 2, 0)
    with pytest.raises(ValueError):
        predict_samples(model, np.zeros(4))
    with pytest.raises(ValueError):
        model.samples_matrix(np.zeros((2, 5)))


def test_fit_accepts_feature_matrix_and_keeps_spec():
    table = synth_table(12, 3, 2, seed=4)
    fm = encode(table.configs, 0, 3, log_params=("lr",))
    model = fit_forest(fm, table.val_loss[:, 0], n_trees=4, seed=6)
    assert model.spec is fm.spec
    assert model.n_features == fm.values.shape[1]


# ---------------------------------------------------------------------------
# serialization


def test_json_round_trip_preserves_predictions():
    rng = np.random.default_rng(13)
    X, y = rng.random((30, 4)), rng.random(30)
    model = fit_forest(X, y, n_trees=6, seed=21)
    clone = ForestModel.from_json(model.to_json())
    q = rng.random((25, 4))
    assert np.array_equal(model.samples_matrix(q), clone.samples_matrix(q))
    assert clone.n_trees == 6 and clone.seed == 21


def test_json_version_guard():
    with pytest.raises(ValueError, match="unsupported"):
        ForestModel.from_json('{"version": 99, "trees": []}')
