import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special, stats

from cosmae.errors import ConfigError, UsageError
from cosmae.replay import (
    MemoryBuffer, MixupConfig, data_mixup, rebalance_insert, sample_lambda, sample_memory,
    sample_memory_batch, task_quotas,
)


def tagged(task_id, n):
    """Images that identify themselves: [task, index]."""
    return np.array([[task_id, i] for i in range(n)], dtype=np.float64)


def keys(buffer, tid=None):
    return {tuple(img) for img, t in zip(buffer.images, buffer.task_ids) if tid is None or t == tid}


def test_lambda_modes():
    rng = np.random.default_rng(0)
    assert sample_lambda(MixupConfig(mode="constant", constant=0.5), rng) == 0.5
    assert np.all(sample_lambda(MixupConfig(mode="constant", constant=0.5), rng, size=4) == 0.5)
    u = sample_lambda(MixupConfig(mode="uniform"), rng, size=1000)
    assert u.min() >= 0 and u.max() <= 1
    with pytest.raises(ConfigError):
        MixupConfig(mode="gaussian")
    with pytest.raises(ConfigError):
        MixupConfig(alpha=0.0)
    with pytest.raises(ConfigError):
        MixupConfig(mode="constant", constant=1.5)


def test_beta_mean_and_cdf():
    lam = sample_lambda(MixupConfig(alpha=0.4), np.random.default_rng(11), size=100_000)
    assert abs(lam.mean() - 0.5) < 0.01
    assert abs((lam < 0.1).mean() - special.betainc(0.4, 0.4, 0.1)) < 0.01


def test_beta_one_matches_uniform():
    rng = np.random.default_rng(5)
    a = sample_lambda(MixupConfig(alpha=1.0), rng, size=10_000)
    b = sample_lambda(MixupConfig(mode="uniform"), rng, size=10_000)
    assert stats.ks_2samp(a, b).pvalue > 0.01


def test_data_mixup_examples():
    a = np.random.default_rng(0).random((2, 3))
    b = np.random.default_rng(1).random((2, 3))
    np.testing.assert_array_equal(data_mixup(a, b, 1.0), a)
    np.testing.assert_array_equal(data_mixup(a, b, 0.0), b)
    np.testing.assert_array_equal(data_mixup(np.zeros(5), np.full(5, 2.0), 0.5), np.ones(5))
    with pytest.raises(UsageError):
        data_mixup(a, b[:1], 0.5)
    with pytest.raises(UsageError):
        data_mixup(a, b, 1.5)


def test_data_mixup_per_image_weights():
    a = np.ones((3, 2))
    b = np.zeros((3, 2))
    out = data_mixup(a, b, np.array([0.0, 0.25, 1.0]))
    np.testing.assert_array_equal(out, [[0, 0], [0.25, 0.25], [1, 1]])


@settings(max_examples=200, deadline=None)
@given(
    a=st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8),
    seed=st.integers(0, 2**32 - 1),
    k=st.integers(0, 1024),
    lam=st.floats(0.0, 1.0),
)
def test_data_mixup_convex_and_symmetric(a, seed, k, lam):
    x = np.array(a)
    y = np.random.default_rng(seed).uniform(-1e3, 1e3, size=x.shape)
    m = data_mixup(x, y, lam)
    slack = 1e-12 * (np.abs(x) + np.abs(y))
    assert np.all(m >= np.minimum(x, y) - slack) and np.all(m <= np.maximum(x, y) + slack)
    np.testing.assert_allclose(m, data_mixup(y, x, 1.0 - lam), rtol=0, atol=1e-9)
    # bit-exact whenever 1 - lam is itself exact, e.g. on a dyadic grid
    d = k / 1024
    np.testing.assert_array_equal(data_mixup(x, y, d), data_mixup(y, x, 1.0 - d))


def test_quotas():
    assert task_quotas(5, [1, 2]) == {1: 3, 2: 2}
    assert task_quotas(4, [1, 2, 3]) == {1: 2, 2: 1, 3: 1}


def test_rebalance_examples():
    rng = np.random.default_rng(0)
    buf = MemoryBuffer(4)
    rebalance_insert(buf, tagged(1, 10), 1, rng)
    assert buf.counts() == {1: 4}
    rebalance_insert(buf, tagged(2, 10), 2, rng)
    assert buf.counts() == {1: 2, 2: 2}

    buf = MemoryBuffer(5)
    for t in (1, 2):
        rebalance_insert(buf, tagged(t, 10), t, rng)
    assert buf.counts() == {1: 3, 2: 2}

    buf = MemoryBuffer(6)
    rebalance_insert(buf, tagged(1, 10), 1, rng)
    first = keys(buf, 1)
    for t in (2, 3):
        rebalance_insert(buf, tagged(t, 10), t, rng)
    assert buf.counts() == {1: 2, 2: 2, 3: 2}
    assert keys(buf, 1) <= first


def test_rebalance_rejects_bad_ids():
    buf = MemoryBuffer(4)
    rebalance_insert(buf, tagged(2, 3), 2, np.random.default_rng(0))
    with pytest.raises(UsageError):
        rebalance_insert(buf, tagged(1, 3), 1, np.random.default_rng(0))
    with pytest.raises(UsageError):
        rebalance_insert(buf, tagged(3, 0), 3, np.random.default_rng(0))


@settings(max_examples=150, deadline=None)
@given(capacity=st.integers(3, 64), n_tasks=st.integers(1, 8), seed=st.integers(0, 2**32 - 1),
       short=st.booleans())
def test_rebalance_properties(capacity, n_tasks, seed, short):
    rng = np.random.default_rng(seed)
    buf = MemoryBuffer(capacity)
    inserted = set()
    for t in range(1, n_tasks + 1):
        # "short" tasks may hold fewer images than their quota
        n = int(rng.integers(1, capacity + 1)) if short else int(rng.integers(capacity, 2 * capacity + 1))
        before = {tid: keys(buf, tid) for tid in buf.tasks()}
        imgs = tagged(t, n)
        inserted |= {tuple(r) for r in imgs}
        rebalance_insert(buf, imgs, t, rng)
        assert len(buf) <= capacity
        assert keys(buf) <= inserted
        for tid, old in before.items():
            assert keys(buf, tid) <= old  # stored tasks only ever shrink
        if not short:
            counts = [buf.counts().get(tid, 0) for tid in range(1, t + 1)]
            assert max(counts) - min(counts) <= 1
            assert len(buf) == capacity


def test_sample_memory():
    rng = np.random.default_rng(0)
    buf = MemoryBuffer(4)
    rebalance_insert(buf, tagged(1, 1), 1, rng)
    assert all(tuple(sample_memory(buf, rng)) == (1.0, 0.0) for _ in range(20))

    buf = MemoryBuffer(4)
    rebalance_insert(buf, tagged(1, 4), 1, rng)
    draws = sample_memory_batch(buf, 40_000, np.random.default_rng(9))[:, 1]
    freq = np.bincount(draws.astype(int), minlength=4) / 40_000
    assert np.all(np.abs(freq - 0.25) < 0.02)
    again = sample_memory_batch(buf, 100, np.random.default_rng(9))
    np.testing.assert_array_equal(again, sample_memory_batch(buf, 100, np.random.default_rng(9)))
    with pytest.raises(UsageError):
        sample_memory(MemoryBuffer(3), rng)
