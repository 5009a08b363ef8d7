import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from krausflow.linalg import ContractViolation, DegenerateInputError, fro_norm, hs_inner
from krausflow.sampling import haar_unitary
from krausflow.stiefel import (
    DRIFT_HARD_LIMIT,
    StiefelPoint,
    TangentVector,
    WTransform,
    apply_w,
    channel,
    distance_to_unitary_submanifold,
    drift,
    flatten,
    gram,
    random_stiefel,
    retract,
    tangent_project,
    unflatten,
    unitary_point,
)

seeds = st.integers(0, 2**32 - 1)
dims = st.integers(2, 4)


def ambient(rng, s):
    shape = s.blocks.shape
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def test_flatten_layout(rng):
    s = random_stiefel(2, rng)
    m = flatten(s)
    assert m.shape == (8, 2)
    np.testing.assert_array_equal(m[0:2], s.blocks[0])
    np.testing.assert_array_equal(m[6:8], s.blocks[3])
    np.testing.assert_array_equal(unflatten(m).blocks, s.blocks)
    np.testing.assert_allclose(m.conj().T @ m, gram(s), atol=1e-14)


def test_point_rejects_bad_input():
    with pytest.raises(ValueError):
        StiefelPoint(np.full((4, 2, 2), np.nan))
    with pytest.raises(ValueError):
        StiefelPoint(np.zeros((3, 2, 2)))


def test_point_is_immutable(rng):
    s = random_stiefel(2, rng)
    with pytest.raises(ValueError):
        s.blocks[0, 0, 0] = 1.0


def test_validate(rng):
    s = random_stiefel(2, rng)
    assert s.validate() is s
    with pytest.raises(ContractViolation):
        StiefelPoint(1.01 * s.blocks).validate()


@given(seeds, dims)
def test_tangent_projector_properties(seed, n):
    rng = np.random.default_rng(seed)
    s = random_stiefel(n, rng)
    a, b = ambient(rng, s), ambient(rng, s)
    pa = tangent_project(s, a).blocks
    pb = tangent_project(s, b).blocks
    assert fro_norm(tangent_project(s, pa).blocks - pa) <= 1e-10 * max(1, fro_norm(a))
    assert hs_inner(pa, b) == pytest.approx(hs_inner(a, pb), abs=1e-10 * fro_norm(a) * fro_norm(b))
    assert abs(hs_inner(a - pa, pb)) <= 1e-10 * fro_norm(a) * fro_norm(b)
    x = np.einsum("iab,iac->bc", s.blocks.conj(), pa)
    assert fro_norm(x + x.conj().T) <= 1e-10 * max(1, fro_norm(pa))


def test_project_point_onto_itself(rng):
    s = random_stiefel(3, rng)
    assert tangent_project(s, s.blocks).norm() < 1e-12


def test_retract_examples(rng):
    s = random_stiefel(3, rng)
    assert fro_norm(retract(s).blocks - s.blocks) <= 1e-12
    r = retract(StiefelPoint(1.01 * s.blocks))
    assert drift(r) <= 1e-12
    # same column space: the projector onto span(S) fixes the repaired columns
    m = flatten(s)
    proj = m @ m.conj().T
    assert fro_norm(proj @ flatten(r) - flatten(r)) < 1e-12


def test_retract_rejects():
    s = np.zeros((4, 2, 2), dtype=complex)
    s[0] = np.eye(2)
    with pytest.raises(ContractViolation):
        retract(StiefelPoint(2 * s))
    bad = np.zeros((4, 2, 2), dtype=complex)
    bad[0, 0, 0] = 1.0
    with pytest.raises((ContractViolation, DegenerateInputError)):
        retract(StiefelPoint(bad))


def test_apply_w(rng):
    s = random_stiefel(2, rng)
    np.testing.assert_allclose(apply_w(np.eye(4), s).blocks, s.blocks)
    w = WTransform(haar_unitary(4, rng))
    t = apply_w(w, s)
    assert drift(t) < 1e-10
    rho = np.diag(rng.dirichlet(np.ones(2))).astype(complex)
    assert fro_norm(channel(t, rho) - channel(s, rho)) < 1e-10
    # block j is sum_i u_ji K_i, checked for one block by hand
    np.testing.assert_allclose(t.blocks[1], sum(w.u[1, i] * s.blocks[i] for i in range(4)), atol=1e-14)


def test_w_transform_rejects_nonunitary():
    with pytest.raises(ContractViolation):
        WTransform(2 * np.eye(4))


def test_random_stiefel(rng):
    s = random_stiefel(3, rng)
    assert s.blocks.shape == (9, 3, 3)
    assert drift(s) < 1e-12
    a = random_stiefel(3, np.random.default_rng(1))
    b = random_stiefel(3, np.random.default_rng(1))
    c = random_stiefel(3, np.random.default_rng(2))
    assert np.array_equal(a.blocks, b.blocks)
    assert not np.array_equal(a.blocks, c.blocks)
    with pytest.raises(ValueError):
        random_stiefel(1, rng)


def test_random_stiefel_left_invariance(rng):
    n = 2
    w = haar_unitary(n**3, np.random.default_rng(99))
    g = np.random.default_rng(98).standard_normal((n**3, n)) + 0j
    xs, ys = [], []
    for _ in range(2000):
        m = flatten(random_stiefel(n, rng))
        xs.append(hs_inner(g, m))
        ys.append(hs_inner(g, w @ m))
    xs, ys = np.array(xs), np.array(ys)
    se = np.sqrt(xs.var() / xs.size + ys.var() / ys.size)
    assert abs(xs.mean() - ys.mean()) <= 4 * se


def test_unitary_point(rng):
    p = unitary_point(np.eye(2))
    np.testing.assert_allclose(p.blocks, np.broadcast_to(np.eye(2) / 2, (4, 2, 2)))
    assert drift(p) < 1e-15
    u = haar_unitary(3, rng)
    s = unitary_point(u)
    assert distance_to_unitary_submanifold(s) < 1e-12
    rho = np.diag([0.5, 0.3, 0.2]).astype(complex)
    assert fro_norm(channel(s, rho) - u @ rho @ u.conj().T) < 1e-12
    with pytest.raises(ContractViolation):
        unitary_point(2 * np.eye(2))


def test_distance_generic_point(rng):
    d = [distance_to_unitary_submanifold(random_stiefel(2, rng)) for _ in range(100)]
    assert np.mean(np.array(d) > 0.1) == 1.0


def test_tangent_vector_norm():
    v = TangentVector(np.ones((4, 2, 2)))
    assert v.norm() == pytest.approx(4.0)
    assert DRIFT_HARD_LIMIT == 2e-4
