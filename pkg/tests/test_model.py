import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bmpmoments.errors import InfeasibleTarget, InvalidModel
from bmpmoments.model import (
    BmpModel,
    build_model,
    canonical,
    coupled_small_model,
    decoupled_model,
    dump_model,
    from_jordan,
    from_mean,
    jordan_block_model,
    load_model,
    mean_matrix,
    mean_offspring,
    model_from_dict,
    model_to_dict,
    multitype,
    rotation_model,
    validate_model,
    yule,
    zeta_apply,
)
from conftest import small_models
from oracles import brute_zeta


class TestValidation:
    def test_yule_is_valid(self):
        assert validate_model(yule()).ok

    def test_reports_every_problem(self):
        m = BmpModel(2, [[-1.0, 0.5], [0.0, 0.0]], [1.0, -1.0], [[(0.5, (0,))], [(1.0, (5,))]])
        problems = validate_model(m).problems
        assert len(problems) == 4
        assert any("row 0 sums" in p for p in problems)
        assert any("negative" in p for p in problems)
        assert any("sum to 0.5" in p for p in problems)
        assert any("outside" in p for p in problems)

    def test_mean_matrix_refuses_invalid(self):
        m = BmpModel(1, [[0.0]], [1.0], [[(0.9, (0, 0))]])
        with pytest.raises(InvalidModel):
            mean_matrix(m)

    def test_arrays_are_read_only(self):
        m = yule()
        with pytest.raises(ValueError):
            m.Q[0, 0] = 1.0


class TestMeanMatrix:
    def test_yule(self):
        assert mean_matrix(yule(1.7)) == pytest.approx(np.array([[1.7]]))

    def test_jordan_block(self):
        np.testing.assert_allclose(mean_matrix(jordan_block_model()), [[1.0, 1.0], [0.0, 1.0]])

    def test_decoupled(self):
        np.testing.assert_allclose(mean_matrix(decoupled_model()), np.diag([2.0, 0.5]))

    def test_coupled_small(self):
        np.testing.assert_allclose(mean_matrix(coupled_small_model()), [[1.5, 1.0], [0.0, 0.5]])

    def test_rotation_is_circulant(self):
        A = mean_matrix(rotation_model())
        a = 2.0 / np.sqrt(3.0)
        expected = 2 * a * np.eye(3) + a * np.roll(np.eye(3), 1, axis=1)
        np.testing.assert_allclose(A, expected, atol=1e-14)

    def test_pure_motion(self):
        Q = [[-1.0, 1.0], [2.0, -2.0]]
        m = multitype(Q, [0.0, 0.0], [[(1.0, (0,))], [(1.0, (1,))]])
        np.testing.assert_allclose(mean_matrix(m), Q)


class TestBuilders:
    def test_from_mean_round_trip(self, rng):
        for _ in range(20):
            n = int(rng.integers(1, 5))
            M = rng.uniform(0, 3, (n, n))
            gamma = rng.uniform(0.1, 2, n)
            m = from_mean(M, gamma)
            np.testing.assert_allclose(mean_offspring(m), M, atol=1e-10)
            assert all(len(law) <= n + 1 for law in m.offspring)

    def test_from_mean_zero_rate_rows(self):
        m = from_mean([[5.0, 0.0], [1.0, 1.0]], [0.0, 1.0])
        assert m.offspring[0] == ((1.0, (0,)),)

    def test_from_mean_rejects_negative_means(self):
        with pytest.raises(InfeasibleTarget):
            from_mean([[1.0, -0.5], [0.0, 1.0]], [1.0, 1.0])

    def test_from_jordan_reproduces_target(self):
        J = np.array([[1.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.2]])
        V = np.eye(3)
        m = from_jordan(J, V, [2.0, 2.0, 2.0])
        np.testing.assert_allclose(mean_matrix(m), J, atol=1e-12)
        assert m.jordan is not None

    def test_from_jordan_rejects_singular_basis(self):
        with pytest.raises(InfeasibleTarget):
            from_jordan(np.eye(2), [[1.0, 1.0], [1.0, 1.0]], [1.0, 1.0])

    def test_rotation_needs_enough_rate(self):
        with pytest.raises(InfeasibleTarget):
            rotation_model(gamma=1.0)

    def test_build_model_dispatch(self):
        assert build_model({"kind": "yule", "beta": 2.0}).gamma[0] == 2.0
        assert build_model({"kind": "canonical", "name": "jordan"}).n == 2
        with pytest.raises(ValueError):
            build_model({"kind": "nope"})
        with pytest.raises(ValueError):
            canonical("nope")


class TestJson:
    def test_round_trip(self, tmp_path):
        m = coupled_small_model()
        path = tmp_path / "m.json"
        dump_model(m, path)
        back = load_model(path)
        np.testing.assert_allclose(mean_matrix(back), mean_matrix(m), atol=1e-10)
        assert json.loads(path.read_text())["n"] == 2

    def test_dict_format(self):
        d = model_to_dict(yule())
        assert d == {"n": 1, "Q": [[0.0]], "gamma": [1.0], "offspring": [[{"p": 1.0, "children": [0, 0]}]]}
        assert model_from_dict(d).offspring == yule().offspring


class TestZeta:
    def test_yule_pair(self):
        # one parent, two children: 2 ordered injective assignments
        assert zeta_apply(yule(), [1, 2], lambda b, y: 1.0, 0) == pytest.approx(2.0)

    def test_yule_triple(self):
        # three two-block partitions times two assignments; three singletons need 3 children
        assert zeta_apply(yule(), [1, 2, 3], lambda b, y: 1.0, 0) == pytest.approx(6.0)

    def test_singleton_is_empty_sum(self):
        assert zeta_apply(yule(), [1], lambda b, y: 1.0, 0) == 0.0

    def test_mapping_argument(self):
        m = jordan_block_model()
        g = {frozenset([0]): np.array([1.0, 2.0]), frozenset([1]): np.array([3.0, 5.0])}
        # atom {0, 0, 1}: ordered pairs of distinct children
        values = [1 * 3, 1 * 5, 1 * 3, 1 * 5, 2 * 3, 2 * 3]
        assert zeta_apply(m, [0, 1], g, 0) == pytest.approx(sum(values))

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError):
            zeta_apply(yule(), [], lambda b, y: 1.0, 0)


@given(small_models(), st.integers(1, 4), st.integers(0, 10**6))
def test_zeta_matches_brute_force(model, size, seed):
    rng = np.random.default_rng(seed)
    A = list(range(size))
    table = {}

    def g(block, y):
        key = (frozenset(block), y)
        if key not in table:
            table[key] = complex(rng.normal(), rng.normal())
        return table[key]

    for x in range(model.n):
        ref = brute_zeta([(a.p, a.children) for a in model.offspring[x]], A, g)
        assert abs(zeta_apply(model, A, g, x) - ref) <= 1e-12 * max(1.0, abs(ref))


@given(small_models())
def test_random_models_are_valid(model):
    assert validate_model(model).ok
    A = mean_matrix(model)
    off = A - np.diag(np.diag(A))
    assert np.all(off >= -1e-12)
