import numpy as np
import pytest

from ctphish.errors import DimensionMismatch, EmptyClass, UntrainedModel
from ctphish.forest import RandomForest, _best_split, build_tree, tree_rng


@pytest.fixture(scope="module")
def blobs():
    rng = np.random.default_rng(42)
    benign = rng.normal(loc=(0.0, 0.0), scale=0.7, size=(150, 2))
    phish = rng.normal(loc=(5.0, 5.0), scale=0.7, size=(150, 2))
    noise = rng.uniform(0, 5, size=(300, 1))
    X = np.hstack([np.vstack([benign, phish]), noise])
    y = np.array([0] * 150 + [1] * 150)
    return X, y


def test_best_split_picks_midpoint():
    x = np.array([1.0, 2.0, 3.0, 10.0, 11.0, 12.0])
    y = np.array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0])
    assert _best_split(x, y) == (0.0, 6.5)


def test_best_split_constant_feature():
    assert _best_split(np.ones(5), np.array([0.0, 1.0, 0.0, 1.0, 1.0])) is None


def test_root_split_separates_classes():
    X = np.array([[0.0, 3.0], [1.0, 1.0], [2.0, 2.0], [10.0, 3.0], [11.0, 1.0], [12.0, 2.0]])
    y = np.array([0, 0, 0, 1, 1, 1])
    # with max_features=2 the root sees both features; only feature 0 splits cleanly
    tree = build_tree(X, y, tree_rng(0, 0), max_features=2)
    assert tree.feature[0] == 0 or tree.node_count == 1
    leaves = tree.feature == -1
    assert set(np.unique(tree.value[leaves])) <= {0.0, 1.0}


def test_forest_separates_blobs(blobs):
    X, y = blobs
    forest = RandomForest(n_trees=25, seed=1).fit(X, y)

    samples = np.array([[0.0, 0.0, 2.5], [5.0, 5.0, 2.5]])
    benign_score, phish_score = forest.predict_proba(samples)
    assert benign_score < 0.1
    assert phish_score > 0.9
    accuracy = ((forest.predict_proba(X) >= 0.5) == y).mean()
    assert accuracy >= 0.99


def test_tree_k_independent_of_forest_size(blobs):
    X, y = blobs
    small = RandomForest(n_trees=3, seed=9).fit(X, y)
    large = RandomForest(n_trees=6, seed=9).fit(X, y)
    assert [t.to_dict() for t in small.trees] == [t.to_dict() for t in large.trees[:3]]


def test_parallel_training_is_deterministic(blobs):
    X, y = blobs
    serial = RandomForest(n_trees=8, seed=5, n_jobs=1).fit(X, y)
    parallel = RandomForest(n_trees=8, seed=5, n_jobs=4).fit(X, y)
    assert serial.to_dict() == parallel.to_dict()


def test_scores_independent_of_tree_order(blobs):
    X, y = blobs
    forest = RandomForest(n_trees=10, seed=2).fit(X, y)
    scores = forest.predict_proba(X)
    forest.trees.reverse()
    assert np.array_equal(forest.predict_proba(X), scores)


def test_mdi_ranks_informative_features_first(blobs):
    X, y = blobs
    importances = RandomForest(n_trees=20, seed=3).fit(X, y).feature_importances()
    assert importances.sum() == pytest.approx(1.0)
    assert importances[2] < importances[0]
    assert importances[2] < importances[1]


def test_serialization_keeps_scores(blobs):
    X, y = blobs
    forest = RandomForest(n_trees=5, seed=4).fit(X, y)
    restored = RandomForest.from_dict(forest.to_dict())
    assert np.array_equal(restored.predict_proba(X), forest.predict_proba(X))


def test_from_dict_rejects_out_of_range_feature(blobs):
    X, y = blobs
    data = RandomForest(n_trees=1, seed=4).fit(X, y).to_dict()
    data["n_features"] = 0
    with pytest.raises(ValueError):
        RandomForest.from_dict(data)


def test_fit_validation():
    with pytest.raises(EmptyClass):
        RandomForest(n_trees=2).fit(np.zeros((4, 2)), np.zeros(4))
    with pytest.raises(DimensionMismatch):
        RandomForest(n_trees=2).fit(np.zeros((4, 2)), np.array([0, 1]))
    with pytest.raises(ValueError):
        RandomForest(n_trees=2).fit(np.array([[np.nan, 0.0], [1.0, 1.0]]), np.array([0, 1]))
    with pytest.raises(ValueError):
        RandomForest(n_trees=0)


def test_predict_validation(blobs):
    with pytest.raises(UntrainedModel):
        RandomForest().predict_proba(np.zeros((1, 3)))
    X, y = blobs
    forest = RandomForest(n_trees=2).fit(X, y)
    with pytest.raises(DimensionMismatch):
        forest.predict_proba(np.zeros((1, 2)))
