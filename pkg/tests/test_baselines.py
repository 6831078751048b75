import numpy as np
import pytest

from oracles import pair_count_auc
from theftnet.baselines import (
    ForestConfig,
    ForestModel,
    GbmConfig,
    Tree,
    baseline_from_text,
    baseline_to_text,
    predict_baseline,
    train_gbm,
    train_random_forest,
)
from theftnet.data import generate_synthetic, impute_missing
from theftnet.errors import ConfigurationError, ParseError
from theftnet.features import feature_matrix
from theftnet.tensor import bce_loss, sigmoid


@pytest.fixture(scope="module")
def synthetic_features():
    ds = generate_synthetic(300, 0.2, 0.0, seed=21)
    X = feature_matrix(np.stack([impute_missing(r).readings for r in ds.records]))
    return X, ds.labels


def separable(n=40, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 10, n)
    return x[:, None], (x > 5).astype(int)


def small_forest(**kw):
    return ForestConfig(**{"n_trees": 10, "max_depth": 4, "min_leaf": 2, **kw})


def leaf_count_oracle(tree: Tree, X):
    """Walk every row down the tree one node at a time."""
    hits = np.zeros(tree.n_nodes, int)
    for x in X:
        node = 0
        while tree.feature[node] >= 0:
            node = tree.left[node] if x[tree.feature[node]] <= tree.threshold[node] else tree.right[node]
        hits[node] += 1
    return hits


class TestForest:
    def test_single_class_predicts_prior(self):
        X = np.random.default_rng(0).standard_normal((30, 4))
        model = train_random_forest(X, np.zeros(30), small_forest())
        np.testing.assert_array_equal(predict_baseline(model, X), 0.0)

    def test_separable_one_feature(self):
        X, y = separable()
        model = train_random_forest(X, y, small_forest(bootstrap=False, min_leaf=1))
        assert np.array_equal(predict_baseline(model, X) > 0.5, y == 1)

    def test_deterministic(self, synthetic_features):
        X, y = synthetic_features
        a = train_random_forest(X, y, small_forest(seed=4))
        b = train_random_forest(X, y, small_forest(seed=4))
        assert baseline_to_text(a) == baseline_to_text(b)
        c = train_random_forest(X, y, small_forest(seed=5))
        assert baseline_to_text(a) != baseline_to_text(c)

    def test_mean_of_trees(self, synthetic_features):
        X, y = synthetic_features
        model = train_random_forest(X, y, small_forest())
        per_tree = np.mean([t.predict(X) for t in model.trees], axis=0)
        assert np.abs(predict_baseline(model, X) - per_tree).max() < 1e-12

    def test_single_tree_forest(self, synthetic_features):
        X, y = synthetic_features
        model = train_random_forest(X, y, small_forest(n_trees=1))
        np.testing.assert_array_equal(predict_baseline(model, X), model.trees[0].predict(X))

    def test_depth_and_leaf_partition(self, synthetic_features):
        X, y = synthetic_features
        model = train_random_forest(X, y, small_forest())
        for tree in model.trees:
            assert tree.depth <= 4
            assert np.all(tree.feature < 43)
            leaves = tree.apply(X)
            assert np.all(tree.feature[leaves] == -1)
            np.testing.assert_array_equal(np.bincount(leaves, minlength=tree.n_nodes), leaf_count_oracle(tree, X))

    def test_probabilities_in_unit_interval(self, synthetic_features):
        X, y = synthetic_features
        p = predict_baseline(train_random_forest(X, y, small_forest()), X)
        assert np.all((p >= 0) & (p <= 1))

    def test_monotone_feature_transform(self, synthetic_features):
        X, y = synthetic_features
        X2 = X.copy()
        X2[:, 0] = np.exp(X2[:, 0] / (1 + np.abs(X2[:, 0]).max()))  # strictly increasing
        a = train_random_forest(X, y, small_forest())
        b = train_random_forest(X2, y, small_forest())
        np.testing.assert_array_equal(predict_baseline(a, X), predict_baseline(b, X2))

    def test_row_independence(self, synthetic_features):
        X, y = synthetic_features
        model = train_random_forest(X, y, small_forest())
        doubled = predict_baseline(model, np.vstack([X[:5], X[:5]]))
        np.testing.assert_array_equal(doubled[:5], doubled[5:])

    def test_default_features_per_split(self):
        assert ForestConfig().max_features is None  # resolved to ceil(sqrt(43)) = 7 at training time
        X = np.random.default_rng(1).standard_normal((60, 43))
        y = (X[:, 0] > 0).astype(int)
        model = train_random_forest(X, y, ForestConfig(n_trees=2, max_depth=2))
        assert model.n_trees == 2 and len(model.tree_seeds) == 2

    def test_width_mismatch_and_empty(self, synthetic_features):
        X, y = synthetic_features
        model = train_random_forest(X, y, small_forest(n_trees=1))
        with pytest.raises(ConfigurationError):
            predict_baseline(model, X[:, :10])
        with pytest.raises(ConfigurationError):
            train_random_forest(X, y, small_forest(n_trees=0))
        with pytest.raises(ConfigurationError):
            predict_baseline(ForestModel([], 43), X)


class TestSplitSearch:
    def test_midpoint_threshold(self):
        X = np.array([[1.0], [2.0], [4.0], [8.0]])
        tree = train_random_forest(X, [0, 0, 1, 1], ForestConfig(1, 1, 1, bootstrap=False)).trees[0]
        assert tree.feature[0] == 0 and tree.threshold[0] == 3.0

    def test_ties_pick_lowest_feature(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        X = np.stack([x, x, x], axis=1)
        tree = train_random_forest(X, [0, 0, 1, 1], ForestConfig(1, 1, 1, max_features=3, bootstrap=False)).trees[0]
        assert tree.feature[0] == 0

    def test_ties_pick_lowest_threshold(self):
        # splitting at 1.5 or 3.5 both isolate one pure pair; the lower threshold wins
        X = np.array([[1.0], [2.0], [3.0], [4.0]])
        tree = train_random_forest(X, [0, 1, 1, 0], ForestConfig(1, 1, 1, bootstrap=False)).trees[0]
        assert tree.threshold[0] == 1.5


class TestGbm:
    def test_zero_rounds_is_prior(self, synthetic_features):
        X, y = synthetic_features
        model = train_gbm(X, y, GbmConfig(n_rounds=0))
        np.testing.assert_allclose(predict_baseline(model, X), y.mean(), rtol=1e-12)

    def test_single_class_constant_clipped_logit(self):
        X = np.random.default_rng(0).standard_normal((20, 3))
        model = train_gbm(X, np.ones(20), GbmConfig(n_rounds=5))
        assert not model.trees
        p = 1 - 1e-15
        assert model.initial_logit == pytest.approx(np.log(p / (1 - p)), rel=1e-12)
        assert np.unique(predict_baseline(model, X)).size == 1

    def test_training_loss_non_increasing(self, synthetic_features):
        X, y = synthetic_features
        history = []
        model = train_gbm(X, y, GbmConfig(), history)
        assert len(history) == 200
        assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))
        staged = [bce_loss(predict_baseline(model.staged(k), X), y) for k in (0, 10, 50, 200)]
        assert all(b <= a + 1e-9 for a, b in zip(staged, staged[1:]))
        assert staged[3] < staged[1]

    def test_staged_matches_decision_function(self, synthetic_features):
        X, y = synthetic_features
        model = train_gbm(X, y, GbmConfig(n_rounds=20))
        np.testing.assert_array_equal(sigmoid(model.decision_function(X, 7)), predict_baseline(model.staged(7), X))

    def test_separable_training_auc(self):
        X, y = separable(seed=3)
        p = predict_baseline(train_gbm(X, y, GbmConfig(n_rounds=20, min_leaf=1)), X)
        assert pair_count_auc(p, y) == 1.0

    def test_depth_limit(self, synthetic_features):
        X, y = synthetic_features
        assert all(t.depth <= 3 for t in train_gbm(X, y, GbmConfig(n_rounds=10)).trees)

    def test_invalid_learning_rate(self, synthetic_features):
        X, y = synthetic_features
        with pytest.raises(ConfigurationError):
            train_gbm(X, y, GbmConfig(learning_rate=0))


class TestText:
    @pytest.mark.parametrize("kind", ["forest", "gbm"])
    def test_round_trip(self, synthetic_features, kind):
        X, y = synthetic_features
        model = train_random_forest(X, y, small_forest()) if kind == "forest" else train_gbm(X, y, GbmConfig(n_rounds=15))
        text = baseline_to_text(model)
        again = baseline_from_text(text)
        assert baseline_to_text(again) == text
        np.testing.assert_array_equal(predict_baseline(again, X), predict_baseline(model, X))

    def test_rejects_unknown_header(self):
        with pytest.raises(ParseError):
            baseline_from_text("theftnet-forest 2\nn_features 1\nn_trees 0\n")
        with pytest.raises(ParseError):
            baseline_from_text("theftnet-gbm 1\nn_features 1\n")


def test_rejects_bad_labels():
    with pytest.raises(ConfigurationError):
        train_random_forest(np.zeros((3, 2)), [0, 2, 1], small_forest())
