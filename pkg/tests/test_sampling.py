import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from krausflow.sampling import SeededStream, haar_unitary, random_rho, random_theta, uniform_simplex

seeds = st.integers(0, 2**63 - 1)


def test_stream_determinism():
    a = SeededStream(5, 3).generator().random(4)
    b = SeededStream(5, 3).generator().random(4)
    c = SeededStream(5, 4).generator().random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert SeededStream(5).child(3) == SeededStream(5, 3)


def test_simplex_single():
    assert uniform_simplex(1, np.random.default_rng(0)).tolist() == [1.0]


@given(seeds, st.integers(1, 12))
def test_simplex_contract(seed, n):
    y = uniform_simplex(n, SeededStream(seed))
    assert np.all(y >= 0)
    assert y.sum() == pytest.approx(1.0, abs=1e-15)


def test_simplex_exchangeable():
    rng = np.random.default_rng(0)
    draws = np.array([uniform_simplex(3, rng) for _ in range(10_000)])
    means = draws.mean(axis=0)
    np.testing.assert_allclose(means, 1 / 3, atol=0.02)
    se = draws.std(axis=0) / np.sqrt(len(draws))
    assert np.ptp(means) <= 4 * np.sqrt(2) * se.max()


def test_simplex_uses_stream():
    assert np.array_equal(uniform_simplex(4, SeededStream(1, 2)), uniform_simplex(4, SeededStream(1, 2)))


def test_random_rho_pure(rng):
    r = random_rho(4, 3, rng)
    assert sorted(r.tolist()) == [0.0, 0.0, 0.0, 1.0]
    assert r[-1] == 0.0


def test_random_rho_maximally_mixed(rng):
    np.testing.assert_array_equal(random_rho(5, 0, rng, maximally_mixed=True), np.full(5, 0.2))
    with pytest.raises(ValueError):
        random_rho(5, 1, rng, maximally_mixed=True)


def test_random_rho_zero_count(rng):
    for _ in range(1000):
        n = int(rng.integers(2, 8))
        d0 = int(rng.integers(0, n))
        r = random_rho(n, d0, rng)
        assert int(np.sum(r < 1e-12)) == d0
        assert r.sum() == pytest.approx(1.0, abs=1e-15)
        if d0:
            assert r[-1] == 0.0


def test_random_rho_leading_zeros(rng):
    r = random_rho(5, 2, rng, placement="leading_zeros")
    assert r[0] == r[1] == 0.0 and np.all(r[2:] > 0)


@pytest.mark.parametrize("d0", [-1, 4])
def test_random_rho_range(rng, d0):
    with pytest.raises(ValueError):
        random_rho(4, d0, rng)


def test_random_rho_bad_placement(rng):
    with pytest.raises(ValueError):
        random_rho(4, 1, rng, placement="middle")


def test_random_theta():
    assert random_theta(5, 1).tolist() == [0, 0, 0, 0, 1]
    assert random_theta(3, 3).tolist() == [1, 1, 1]
    t = random_theta(6, 4)
    assert t.max() == 1 and int(np.sum(t == t.max())) == 4
    for bad in (0, 7):
        with pytest.raises(ValueError):
            random_theta(6, bad)


def test_haar_unitary(rng):
    for n in (1, 3, 6):
        u = haar_unitary(n, rng)
        assert np.linalg.norm(u.conj().T @ u - np.eye(n)) < 1e-12
        assert abs(abs(np.linalg.det(u)) - 1) < 1e-10


def test_haar_column_uniformity():
    rng = np.random.default_rng(1)
    vals = [abs(haar_unitary(4, rng)[0, 0]) ** 2 for _ in range(10_000)]
    assert np.mean(vals) == pytest.approx(0.25, abs=0.02)
