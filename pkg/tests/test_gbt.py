import numpy as np
import pytest

from causalgate.cohort import CohortConfig, generate, split_stratified
from causalgate.gbt import (
    FEATURE_NAMES,
    BoostedModel,
    feature_matrix,
    fit,
    labels,
    predict,
)
from causalgate import kernels

from _oracles import best_split_bruteforce


def test_single_split_exact_fit():
    x = np.array([[0.0], [1.0]])
    y = np.array([0.0, 1.0])
    model = fit(x, y, rounds=1, learning_rate=1.0, max_depth=1)
    assert np.allclose(predict(model, x), y)
    assert model.train_mse[-1] == 0.0


def test_constant_target_base_only():
    x = np.random.default_rng(0).normal(size=(20, 3))
    y = np.full(20, 4.5)
    model = fit(x, y, rounds=10)
    assert model.trees == []
    assert np.allclose(predict(model, x), 4.5)


def test_round_one_split_matches_bruteforce():
    rng = np.random.default_rng(17)
    x = rng.normal(size=(50, 4))
    y = rng.normal(size=50)
    residual = y - y.mean()
    got = kernels.best_split(x, residual, 1)
    want = best_split_bruteforce(x, residual, 1)
    assert got[3] and want[3]
    assert got[0] == want[0]
    assert abs(got[1] - want[1]) <= 1e-12
    assert abs(got[2] - want[2]) <= 1e-9


@pytest.mark.parametrize("trial", range(5))
def test_split_matches_bruteforce_with_ties_and_min_leaf(trial):
    rng = np.random.default_rng(trial)
    x = rng.integers(0, 4, size=(30, 3)).astype(float)  # ties everywhere
    y = rng.normal(size=30)
    for min_leaf in (1, 5):
        got = kernels.best_split(x, y, min_leaf)
        want = best_split_bruteforce(x, y, min_leaf)
        assert got[3] == want[3]
        if got[3]:
            assert got[0] == want[0]
            assert abs(got[1] - want[1]) <= 1e-12


def test_zero_trees_and_zero_shrinkage():
    x = np.random.default_rng(1).normal(size=(30, 2))
    y = np.random.default_rng(2).normal(size=30)
    empty = BoostedModel(base_prediction=float(y.mean()), shrinkage=0.1, max_depth=4, n_features=2)
    assert np.allclose(predict(empty, x), y.mean())
    flat = fit(x, y, rounds=3, learning_rate=0.0)
    assert np.allclose(predict(flat, x), y.mean())


def test_two_round_additivity():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(40, 3))
    y = rng.normal(size=40)
    model = fit(x, y, rounds=2, learning_rate=0.3, max_depth=2)
    assert len(model.trees) == 2
    t1 = BoostedModel(base_prediction=0.0, shrinkage=1.0, max_depth=2,
                      trees=[model.trees[0]], n_features=3, feature_names=model.feature_names)
    t2 = BoostedModel(base_prediction=0.0, shrinkage=1.0, max_depth=2,
                      trees=[model.trees[1]], n_features=3, feature_names=model.feature_names)
    manual = model.base_prediction + 0.3 * (predict(t1, x) + predict(t2, x))
    assert np.allclose(predict(model, x), manual, atol=1e-12)


def test_training_mse_non_increasing():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(120, 5))
    y = x[:, 0] * 2 + np.sin(x[:, 1]) + rng.normal(scale=0.3, size=120)
    model = fit(x, y, rounds=60, learning_rate=0.1, max_depth=3)
    mse = np.array(model.train_mse)
    assert (np.diff(mse) <= 1e-12).all()


def test_beats_mean_predictor_on_synthetic_cohort():
    cohort = generate(CohortConfig(n_patients=600, seed=19))
    train, test = split_stratified(cohort, 0.8, seed=19)
    model = fit(feature_matrix(train), labels(train), rounds=120)
    y_test = labels(test)
    rmse_gbt = np.sqrt(np.mean((predict(model, feature_matrix(test)) - y_test) ** 2))
    rmse_mean = np.sqrt(np.mean((labels(train).mean() - y_test) ** 2))
    assert rmse_gbt <= 0.8 * rmse_mean


def test_feature_vector_order():
    cohort = generate(CohortConfig(n_patients=12, seed=6))
    x = feature_matrix(cohort)
    assert x.shape == (12, len(FEATURE_NAMES))
    assert FEATURE_NAMES[0] == "age_years"
    assert x[0, 0] == cohort[0].age_years


def test_dimension_mismatch_rejected():
    x = np.random.default_rng(5).normal(size=(10, 3))
    y = np.arange(10.0)
    model = fit(x, y, rounds=2)
    with pytest.raises(ValueError, match="does not match model"):
        predict(model, np.zeros((4, 5)))


def test_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    x = rng.normal(size=(60, 4))
    y = rng.normal(size=60)
    model = fit(x, y, rounds=10)
    p1, p2 = tmp_path / "m1.json", tmp_path / "m2.json"
    model.save(p1)
    loaded = BoostedModel.load(p1)
    assert np.allclose(predict(loaded, x), predict(model, x), atol=0)
    loaded.save(p2)
    assert p1.read_bytes() == p2.read_bytes()
