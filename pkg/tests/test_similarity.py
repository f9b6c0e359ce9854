import numpy as np
import pytest

from scanreid import similarity as sim
from scanreid.attention import COLLAB_ATTENDED, SELF_ATTENDED, ProjectedClip, SequenceDescriptor
from scanreid.errors import ContractError, DimensionError
from scanreid.numkit import LinearLayer

from conftest import random_clip


def desc(v, role):
    return SequenceDescriptor(np.asarray(v, dtype=float), role)


def test_similarity_hand_example():
    s = sim.similarity_feature(desc([1, -2], SELF_ATTENDED), desc([0, 0], SELF_ATTENDED),
                               desc([3, 4], COLLAB_ATTENDED), desc([0, 0], COLLAB_ATTENDED))
    np.testing.assert_array_equal(s, [3, -8])


def test_identical_descriptors_give_zero(rng):
    a, b = rng.standard_normal(5), rng.standard_normal(5)
    s = sim.similarity_feature(desc(a, SELF_ATTENDED), desc(a, SELF_ATTENDED),
                               desc(b, COLLAB_ATTENDED), desc(b, COLLAB_ATTENDED))
    assert not s.any()


def test_swap_symmetry(rng):
    v = [rng.standard_normal(6) for _ in range(4)]
    s1 = sim.similarity_feature(desc(v[0], SELF_ATTENDED), desc(v[1], SELF_ATTENDED),
                                desc(v[2], COLLAB_ATTENDED), desc(v[3], COLLAB_ATTENDED))
    s2 = sim.similarity_feature(desc(v[1], SELF_ATTENDED), desc(v[0], SELF_ATTENDED),
                                desc(v[3], COLLAB_ATTENDED), desc(v[2], COLLAB_ATTENDED))
    assert np.array_equal(s1, s2)


def test_similarity_role_and_shape_errors():
    with pytest.raises(ContractError):
        sim.similarity_feature(desc([1], COLLAB_ATTENDED), desc([1], SELF_ATTENDED),
                               desc([1], COLLAB_ATTENDED), desc([1], COLLAB_ATTENDED))
    with pytest.raises(DimensionError):
        sim.similarity_feature(desc([1, 2], SELF_ATTENDED), desc([1], SELF_ATTENDED),
                               desc([1], COLLAB_ATTENDED), desc([1], COLLAB_ATTENDED))


def test_match_score_examples():
    fc3 = LinearLayer(np.array([[1.0], [-1.0]]), np.array([0.5]))
    m = sim.match_score(np.array([1.0, 2.0]), fc3)
    assert m.logit == pytest.approx(-0.5, abs=1e-15)
    assert m.probability == pytest.approx(0.37754, abs=1e-5)
    zero = LinearLayer(np.ones((2, 1)), np.zeros(1))
    assert sim.match_score(np.zeros(2), zero).probability == 0.5
    biased = LinearLayer(np.ones((2, 1)), np.array([1.7]))
    assert sim.match_score(np.zeros(2), biased).probability == pytest.approx(1 / (1 + np.exp(-1.7)), abs=1e-12)
    with pytest.raises(DimensionError):
        sim.match_score(np.zeros(3), fc3)


def test_pool_baseline_examples():
    clip = ProjectedClip(np.array([[1.0, 5.0], [3.0, 2.0]]), np.zeros((2, 2)), np.zeros((2, 2)))
    np.testing.assert_array_equal(sim.pool_baseline(clip, "avg").vec, [2, 3.5])
    np.testing.assert_array_equal(sim.pool_baseline(clip, "max").vec, [3, 5])
    one = ProjectedClip(np.array([[4.0, -1.0]]), np.zeros((1, 2)), np.zeros((1, 2)))
    for mode in ("avg", "max"):
        np.testing.assert_array_equal(sim.pool_baseline(one, mode).vec, [4, -1])


def test_pool_baseline_permutation(rng):
    clip = random_clip(rng, T=7, D=4)
    perm = rng.permutation(7)
    shuffled = ProjectedClip(clip.f_feat[perm], clip.s_feat[perm], clip.c_feat[perm])
    for mode in ("avg", "max"):
        np.testing.assert_allclose(sim.pool_baseline(clip, mode).vec, sim.pool_baseline(shuffled, mode).vec,
                                   atol=1e-15)


def test_generalized_similarity_examples(rng):
    n = 3
    zeros = sim.GeneralizedLinearParams(*(np.zeros((n, n)) for _ in range(6)))
    assert sim.generalized_similarity(rng.standard_normal(n), rng.standard_normal(n), zeros) == 0.0
    A = rng.standard_normal((n, n))
    M = A.T @ A
    p = sim.GeneralizedLinearParams.mahalanobis_setting(M)
    x = rng.standard_normal(n)
    assert sim.generalized_similarity(x, x, p) == pytest.approx(0.0, abs=1e-12)
    p2 = sim.GeneralizedLinearParams.mahalanobis_setting(np.eye(2))
    assert sim.generalized_similarity(np.array([1.0, 0]), np.array([0, 1.0]), p2) == pytest.approx(2.0, abs=1e-12)


def test_generalized_matches_block_form(rng):
    k, n = 4, 3
    p = sim.GeneralizedLinearParams(*(rng.standard_normal((k, n)) for _ in range(6)))
    x, y = rng.standard_normal(n), rng.standard_normal(n)
    big = np.block([[p.A, -p.C], [-p.D, p.B]])
    z = np.concatenate([x, y])
    assert sim.generalized_similarity(x, y, p) == pytest.approx(z @ big @ z, abs=1e-10)


def test_mahalanobis_examples(rng):
    assert sim.mahalanobis(np.array([2.0, 0]), np.zeros(2), np.diag([3.0, 1.0])) == 12.0
    x = rng.standard_normal(4)
    assert sim.mahalanobis(x, x, np.eye(4)) == 0.0
    y = rng.standard_normal(4)
    assert sim.mahalanobis(x, y, np.eye(4)) == pytest.approx(((x - y) ** 2).sum(), abs=1e-12)
    with pytest.raises(DimensionError):
        sim.mahalanobis(x, y, np.eye(3))


def test_degeneracy_random_psd(rng):
    for _ in range(20):
        n = int(rng.integers(1, 8))
        A = rng.standard_normal((n, n))
        M = A @ A.T
        x, y = rng.standard_normal(n), rng.standard_normal(n)
        got = sim.generalized_similarity(x, y, sim.GeneralizedLinearParams.mahalanobis_setting(M))
        assert got == pytest.approx(sim.mahalanobis(x, y, M), abs=1e-9)
