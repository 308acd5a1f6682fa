import numpy as np
import pytest

from cosmae.errors import ConfigError, UsageError
from cosmae.evaluation import (
    average_precision, evaluate_encoder, extract_features, macro_map, micro_map, mlknn_fit, mlknn_predict,
)
from cosmae.mae import MAEModel
from conftest import TINY32
from oracles import ap_by_enumeration, mlknn_direct


def test_prior_with_all_positive_column():
    x = np.arange(10.0)[:, None]
    y = np.ones((10, 1))
    m = mlknn_fit(x, y, k=3, smoothing=1.0)
    assert m.prior_pos[0] == pytest.approx(11 / 12)


def test_three_point_likelihood_tables():
    # points on a line at 0, 1, 3; nearest neighbours (self excluded): 0->1, 1->0, 3->1
    x = np.array([[0.0], [1.0], [3.0]])
    y = np.array([[1], [0], [1]])
    m = mlknn_fit(x, y, k=1, smoothing=1.0)
    # label-positive points 0 and 2 see neighbour 1 (negative): c=0 twice
    np.testing.assert_allclose(m.like_pos[0], [(1 + 2) / (2 + 2), (1 + 0) / (2 + 2)])
    # label-negative point 1 sees neighbour 0 (positive): c=1 once
    np.testing.assert_allclose(m.like_neg[0], [(1 + 0) / (2 + 1), (1 + 1) / (2 + 1)])
    assert m.prior_pos[0] == pytest.approx(3 / 5)


def test_six_point_brute_force_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 3))
    y = np.array([[1, 0], [1, 1], [0, 1], [0, 0], [1, 0], [0, 1]])
    q = rng.standard_normal((4, 3))
    for k in (1, 2, 3):
        got = mlknn_predict(mlknn_fit(x, y, k=k), q)
        np.testing.assert_allclose(got, mlknn_direct(x, y, q, k), rtol=0, atol=1e-9)


def test_eight_point_oracle_with_ties():
    # integer grid: many equal distances exercise the lower-index tie-break
    x = np.array([[0, 0], [1, 0], [0, 1], [1, 1], [2, 0], [0, 2], [2, 2], [1, 2]], dtype=float)
    y = np.array([[1, 0, 1], [0, 1, 1], [1, 1, 0], [0, 0, 1], [1, 0, 0], [0, 1, 0], [1, 1, 1], [0, 0, 0]])
    q = np.array([[0.5, 0.5], [1, 1], [2, 1], [0, 0]], dtype=float)
    for k in (2, 3, 4):
        np.testing.assert_allclose(mlknn_predict(mlknn_fit(x, y, k=k), q), mlknn_direct(x, y, q, k),
                                   rtol=0, atol=1e-9)


def test_duplicates_share_statistics():
    x = np.array([[0.0], [0.0], [5.0], [6.0], [9.0]])
    y = np.array([[1], [1], [0], [1], [0]])
    m = mlknn_fit(x, y, k=2)
    s = mlknn_predict(m, np.array([[0.0]]))
    np.testing.assert_allclose(mlknn_predict(m, x[:2]), np.vstack([s, s]))


def test_pure_cluster_ranks_its_label_first():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 0.01, (4, 2))
    b = rng.normal(10, 0.01, (4, 2)) + np.array([0, 50])
    c = rng.normal(-10, 0.01, (4, 2))
    x = np.vstack([a, b, c])
    y = np.zeros((12, 3), dtype=int)
    y[:4, 0] = y[4:8, 1] = y[8:, 2] = 1
    scores = mlknn_predict(mlknn_fit(x, y, k=3), a[:1])
    assert scores[0, 0] > scores[0, 1] and scores[0, 0] > scores[0, 2]
    assert np.all((scores > 0) & (scores < 1))


def test_rotation_invariance(rng):
    x = rng.standard_normal((20, 4))
    y = (rng.random((20, 3)) < 0.5).astype(int)
    q = rng.standard_normal((5, 4))
    rot, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    a = mlknn_predict(mlknn_fit(x, y, k=4), q)
    b = mlknn_predict(mlknn_fit(x @ rot, y, k=4), q @ rot)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_fit_errors():
    with pytest.raises(ConfigError):
        mlknn_fit(np.zeros((3, 2)), np.zeros((3, 1)), k=3)
    with pytest.raises(ConfigError):
        mlknn_fit(np.zeros((3, 2)), np.full((3, 1), 2), k=1)
    with pytest.raises(ConfigError):
        mlknn_fit(np.zeros((3, 2)), np.zeros((4, 1)), k=1)
    m = mlknn_fit(np.zeros((3, 2)), np.zeros((3, 1)), k=1)
    with pytest.raises(ConfigError):
        mlknn_predict(m, np.zeros((1, 3)))


def test_ap_examples():
    assert average_precision([1, 0, 1], [0.9, 0.8, 0.7]) == pytest.approx(5 / 6)
    assert ap_by_enumeration([(1, 0.9), (0, 0.8), (1, 0.7)]) == pytest.approx(0.8333, abs=1e-4)
    assert micro_map(np.array([[0.9, 0.1], [0.8, 0.2]]), np.array([[1, 0], [1, 0]])) == 1.0
    assert micro_map(np.random.default_rng(0).random((3, 2)), np.ones((3, 2))) == 1.0
    with pytest.raises(UsageError):
        micro_map(np.zeros((2, 2)), np.zeros((2, 2)))


def test_micro_map_matches_enumeration_and_is_rank_based(rng):
    for _ in range(20):
        scores = rng.random((7, 3))
        labels = (rng.random((7, 3)) < 0.4).astype(int)
        labels[0, 0] = 1
        expect = ap_by_enumeration(list(zip(labels.ravel(), scores.ravel())))
        assert micro_map(scores, labels) == pytest.approx(expect, abs=1e-12)
        assert micro_map(np.exp(3 * scores) - 5, labels) == pytest.approx(expect, abs=1e-12)


def test_micro_map_monotone_under_swaps(rng):
    for _ in range(50):
        scores = rng.random(12)
        labels = (rng.random(12) < 0.5).astype(int)
        labels[0], labels[1] = 1, 0
        order = np.argsort(-scores, kind="stable")
        base = micro_map(scores[None], labels[None])
        for i in range(11):
            a, b = order[i], order[i + 1]
            if labels[a] == 1 and labels[b] == 0:
                swapped = scores.copy()
                swapped[a], swapped[b] = scores[b], scores[a]
                assert micro_map(swapped[None], labels[None]) <= base


def test_macro_map_skips_empty_labels():
    scores = np.array([[0.9, 0.5], [0.1, 0.4]])
    labels = np.array([[1, 0], [0, 0]])
    assert macro_map(scores, labels) == 1.0


def test_features_shape_and_identity(rng):
    model = MAEModel.create(TINY32, rng)
    img = rng.random((3, 16, 16)).astype(np.float32)
    f = extract_features(model, np.stack([img, img, rng.random((3, 16, 16)).astype(np.float32)]))
    assert f.shape == (3, 16)
    np.testing.assert_array_equal(f[0], f[1])


def test_random_encoder_is_near_chance(rng):
    model = MAEModel.create(TINY32, rng)
    x = rng.random((96, 3, 16, 16)).astype(np.float32)
    y = (rng.random((96, 4)) < 0.5).astype(int)
    xs = rng.random((64, 3, 16, 16)).astype(np.float32)
    ys = (rng.random((64, 4)) < 0.5).astype(int)
    res = evaluate_encoder(model, x, y, xs, ys, k=10)
    assert abs(res["micro_map"] - ys.mean()) <= 0.1
