import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asot.anchor import (
    AnchorSpace,
    MappedDistribution,
    anchor_cost,
    asot_exact,
    check_encoding,
    easot,
    equivalence_check,
    load_anchor_space,
    map_distribution,
    onehot,
    prop1_bound,
    prop2_bound,
    reconstructed_cost,
    residual_norms,
    save_anchor_space,
    true_cost,
)
from asot.batch import BatchedMarginals, batched_sinkhorn_fixed
from asot.errors import InvalidArgumentError, ParseError
from asot.transport import DiscreteDistribution, SinkhornConfig, solve_exact

from conftest import random_encoding, random_simplex


def test_anchor_cost_345():
    assert anchor_cost(AnchorSpace([[0, 0], [3, 4]])).tolist() == [[0, 5], [5, 0]]


def test_mahalanobis_identity_equals_euclidean(rng):
    W = rng.normal(size=(5, 3))
    assert np.allclose(anchor_cost(AnchorSpace(W, "mahalanobis", np.eye(3))), anchor_cost(AnchorSpace(W)), atol=1e-15)


def test_mahalanobis_scalar_oracle(rng):
    W, M = rng.normal(size=(4, 3)), rng.normal(size=(2, 3))
    C = anchor_cost(AnchorSpace(W, "mahalanobis", M))
    for u in range(4):
        for v in range(4):
            diff = M @ (W[u] - W[v])
            assert abs(C[u, v] - math.sqrt(sum(x * x for x in diff))) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 7), st.integers(1, 4), st.booleans(), st.integers(0, 2**31 - 1))
def test_anchor_cost_metric_axioms(k, d, maha, seed):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(k, d))
    space = AnchorSpace(W, "mahalanobis", rng.normal(size=(d + 1, d))) if maha else AnchorSpace(W)
    C = anchor_cost(space)
    assert np.array_equal(C, C.T)
    assert np.all(np.diag(C) == 0) and np.all(C >= 0)
    for u in range(k):
        for v in range(k):
            for w in range(k):
                assert C[u, w] <= C[u, v] + C[v, w] + 1e-12


def test_anchor_space_validation():
    with pytest.raises(InvalidArgumentError):
        AnchorSpace([[np.inf, 0]])
    with pytest.raises(InvalidArgumentError):
        AnchorSpace([[0, 0]], "mahalanobis")
    with pytest.raises(InvalidArgumentError):
        AnchorSpace([[0, 0]], "mahalanobis", np.eye(3))
    with pytest.raises(InvalidArgumentError):
        AnchorSpace([[0, 0]], "cosine")
    space = AnchorSpace([[0.0, 1.0]])
    with pytest.raises(ValueError):
        space.anchors[0, 0] = 5.0


def test_serialization_round_trip_bit_exact(tmp_path, rng):
    space = AnchorSpace(rng.normal(size=(4, 3)), "mahalanobis", rng.normal(size=(2, 3)))
    path = tmp_path / "space.json"
    save_anchor_space(space, path, model={"kind": "k"})
    loaded, model = load_anchor_space(path)
    assert np.array_equal(loaded.anchors, space.anchors)
    assert np.array_equal(loaded.transform, space.transform)
    assert model == {"kind": "k"}
    record = json.loads(path.read_text())
    assert list(record)[:8] == ["format", "version", "k", "d", "metric", "anchors", "transform_rows", "transform"]


def test_load_rejects_foreign_record(tmp_path):
    path = tmp_path / "x.json"
    path.write_text(json.dumps({"format": "other"}))
    with pytest.raises(ParseError):
        load_anchor_space(path)
    path.write_text("{not json")
    with pytest.raises(ParseError):
        load_anchor_space(path)


def test_map_distribution_aggregates_mass():
    D = DiscreteDistribution.uniform(np.zeros((3, 1)))
    mapped = map_distribution(D, onehot([0, 0, 1], 2))
    assert np.allclose(mapped.mass, [2 / 3, 1 / 3], atol=1e-15)


def test_map_distribution_identity(rng):
    a = random_simplex(rng, 4)
    D = DiscreteDistribution(rng.normal(size=(4, 2)), a)
    assert np.allclose(map_distribution(D, np.eye(4)).mass, a, atol=1e-15)


def test_map_distribution_loop_oracle(rng):
    a = random_simplex(rng, 6)
    Z = random_encoding(rng, 6, 4)
    mapped = map_distribution(DiscreteDistribution(rng.normal(size=(6, 2)), a), Z)
    oracle = [sum(Z[i, u] * a[i] for i in range(6)) for u in range(4)]
    assert np.allclose(mapped.mass, oracle, atol=1e-15)
    assert abs(mapped.mass.sum() - 1) <= 1e-12


def test_map_distribution_row_mismatch(rng):
    with pytest.raises(InvalidArgumentError):
        map_distribution(DiscreteDistribution.uniform(np.zeros((3, 1))), np.eye(2))


def test_check_encoding():
    with pytest.raises(InvalidArgumentError):
        check_encoding([[0.5, 0.6]])
    with pytest.raises(InvalidArgumentError):
        check_encoding([[0.5, 0.5]], onehot=True)
    assert check_encoding([[0.0, 1.0]], onehot=True).shape == (1, 2)


def test_asot_exact_self_and_forced(rng):
    C_s = anchor_cost(AnchorSpace(rng.normal(size=(4, 2))))
    a = MappedDistribution(random_simplex(rng, 4))
    assert abs(asot_exact(a, a, C_s)) <= 1e-9
    assert asot_exact([1.0, 0.0], [0.0, 1.0], [[0, 2.5], [2.5, 0]]) == pytest.approx(2.5)


def test_easot_self_transport(rng):
    # unit-spaced anchors: off-diagonal kernel entries are at most exp(-10)
    C_s = anchor_cost(AnchorSpace([[0, 0], [1, 0], [0, 1], [1, 1]]))
    a = random_simplex(rng, 4)
    assert easot(a, a, C_s, SinkhornConfig(0.1, 50)) <= 1e-3


def test_easot_small_epsilon_limit(rng):
    C_s = anchor_cost(AnchorSpace(rng.uniform(size=(4, 2))))
    a, b = random_simplex(rng, 4), random_simplex(rng, 4)
    assert abs(easot(a, b, C_s, SinkhornConfig(0.01, 2000)) - asot_exact(a, b, C_s)) <= 1e-3


def test_easot_batched_equals_per_pair(rng):
    k, N = 5, 7
    C_s = anchor_cost(AnchorSpace(rng.normal(size=(k, 2))))
    A = rng.dirichlet(np.ones(k), size=N).T
    B = rng.dirichlet(np.ones(k), size=N).T
    batched = batched_sinkhorn_fixed(BatchedMarginals(A, B), C_s)
    assert np.max(np.abs(batched - [easot(A[:, i], B[:, i], C_s) for i in range(N)])) <= 1e-10


def test_reconstructed_cost_cases(rng):
    C_s = anchor_cost(AnchorSpace(rng.normal(size=(3, 2))))
    assert np.allclose(reconstructed_cost(np.eye(3), C_s, np.eye(3)), C_s, atol=0)
    u, v = [2, 0], [1, 1, 0]
    C_hat = reconstructed_cost(onehot(u, 3), C_s, onehot(v, 3))
    for i in range(2):
        for j in range(3):
            assert C_hat[i, j] == C_s[u[i], v[j]]
    Zx, Zy = random_encoding(rng, 2, 3), random_encoding(rng, 4, 3)
    C_hat = reconstructed_cost(Zx, C_s, Zy)
    for i in range(2):
        for j in range(4):
            total = sum(Zx[i, a] * Zy[j, b] * C_s[a, b] for a in range(3) for b in range(3))
            assert abs(C_hat[i, j] - total) <= 1e-12
    with pytest.raises(InvalidArgumentError):
        reconstructed_cost(Zx, C_s, np.eye(2))


def test_prop1_bound_arithmetic(rng):
    C = rng.uniform(size=(2, 2))
    assert prop1_bound(C + 0.1, C) == pytest.approx(0.4, abs=1e-12)
    assert prop1_bound(C, C) == 0.0
    with pytest.raises(InvalidArgumentError):
        prop1_bound(C, np.zeros((2, 3)))


def test_prop1_zero_bound_collapses(rng):
    X = rng.normal(size=(3, 2))
    Y = rng.normal(size=(4, 2))
    space = AnchorSpace(np.vstack([X, Y]))
    Dx, Dy = DiscreteDistribution(X, random_simplex(rng, 3)), DiscreteDistribution(Y, random_simplex(rng, 4))
    Zx, Zy = onehot(range(3), 7), onehot(range(3, 7), 7)
    C_hat = reconstructed_cost(Zx, anchor_cost(space), Zy)
    assert prop1_bound(C_hat, true_cost(Dx, Dy)) <= 1e-12
    w_as, _ = equivalence_check(Dx, Dy, Zx, Zy, space)
    assert abs(w_as - solve_exact(Dx.mass, Dy.mass, true_cost(Dx, Dy))[1]) <= 1e-9


def test_prop2_bound_arithmetic():
    assert prop2_bound([0.3], [0.4]) == pytest.approx(0.7)
    assert prop2_bound([0, 0], [0]) == 0.0
    assert prop2_bound([1.0, 2.0], [0.5]) == pytest.approx(1 * 3.0 + 2 * 0.5)
    with pytest.raises(InvalidArgumentError):
        prop2_bound([-0.1], [0.2])


def test_equivalence_identity_encoding(rng):
    X, Y = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    Dx = DiscreteDistribution(X, random_simplex(rng, 3))
    Dy = DiscreteDistribution(Y, random_simplex(rng, 3))
    # anchors are the samples of Dx; Dy is encoded onto the same anchors
    space = AnchorSpace(X)
    Zy = onehot(range(3), 3)
    w_as, w_lp = equivalence_check(Dx, Dy, np.eye(3), Zy, space)
    assert abs(w_as - w_lp) <= 1e-8 * max(1, w_as)


def test_residual_norms(rng):
    W = rng.normal(size=(3, 2))
    X = W[[0, 2]] + [[0.3, 0.4], [0.0, 0.0]]
    assert np.allclose(residual_norms(X, onehot([0, 2], 3), W), [0.5, 0.0])


def _pair(rng, n, m, d=2):
    Dx = DiscreteDistribution(rng.normal(size=(n, d)), random_simplex(rng, n))
    Dy = DiscreteDistribution(rng.normal(size=(m, d)), random_simplex(rng, m))
    return Dx, Dy


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 10), st.integers(2, 10), st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_equivalence_one_hot_property(n, m, k, seed):
    rng = np.random.default_rng(seed)
    Dx, Dy = _pair(rng, n, m)
    space = AnchorSpace(rng.normal(size=(k, 2)))
    Zx, Zy = onehot(rng.integers(k, size=n), k), onehot(rng.integers(k, size=m), k)
    w_as, w_lp = equivalence_check(Dx, Dy, Zx, Zy, space)
    assert abs(w_as - w_lp) <= 1e-8 * max(1.0, w_as)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.integers(1, 10), st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_anchor_problem_lower_bounds_reconstructed_lp(n, m, k, seed):
    # Z_x^T T Z_y is a coupling of (a', b') for every coupling T of (a, b),
    # so the anchor-space optimum can only be smaller.
    rng = np.random.default_rng(seed)
    Dx, Dy = _pair(rng, n, m)
    space = AnchorSpace(rng.normal(size=(k, 2)))
    w_as, w_lp = equivalence_check(Dx, Dy, random_encoding(rng, n, k), random_encoding(rng, m, k), space)
    assert w_as <= w_lp + 1e-9 * max(1.0, w_lp)


def test_soft_encodings_can_break_equality():
    # one sample each, both spread evenly over two anchors: the anchor-space
    # problem transports nothing, the reconstructed cost is C_s(0, 1) / 2
    space = AnchorSpace([[0.0], [2.0]])
    D = DiscreteDistribution([[1.0]], [1.0])
    z = np.array([[0.5, 0.5]])
    w_as, w_lp = equivalence_check(D, D, z, z, space)
    assert w_as == 0.0
    assert w_lp == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_map_distribution_preserves_mass(n, k, seed):
    rng = np.random.default_rng(seed)
    D = DiscreteDistribution(rng.normal(size=(n, 1)), random_simplex(rng, n))
    assert abs(map_distribution(D, random_encoding(rng, n, k)).mass.sum() - 1) <= 1e-12
