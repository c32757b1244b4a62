import numpy as np
import pytest
from hypothesis import given, strategies as st

from bmpmoments import (
    NonDecaying,
    NotInRegime,
    canonical,
    classify_regimes,
    decompose_model,
    from_mean,
    moment_hierarchy,
    yule,
)
from bmpmoments.diagnostics import _twisted_moments
from bmpmoments.limits import (
    critical_exponent,
    even_recursion_resolvent,
    improper_integral,
    large_theorem_limit,
    limit_critical,
    limit_large,
    limit_small,
    limit_small_star,
)
from bmpmoments.spectral import classify_function


def _setup(name):
    m = canonical(name)
    d = decompose_model(m)
    return m, d, classify_regimes(d)


class TestImproperIntegral:
    def test_exponential(self):
        res = improper_integral(lambda s: (2 * np.exp(-2 * s) * np.exp(s))[:, None], 1.0, 0)
        assert res.value[0] == pytest.approx(2.0, abs=1e-9)

    def test_zero_integrand(self):
        res = improper_integral(lambda s: np.zeros((len(s), 3)), 1.0, 0)
        assert np.all(res.value == 0)
        assert res.panels == 0

    def test_polynomial_factor(self):
        res = improper_integral(lambda s: (np.exp(-s) * (1 + s))[:, None], 1.0, 1)
        assert res.value[0] == pytest.approx(2.0, abs=1e-9)
        assert res.error < 1e-9

    def test_growing_integrand_rejected(self):
        with pytest.raises(NonDecaying):
            improper_integral(lambda s: np.exp(0.5 * s)[:, None] * np.exp(s ** 1.5)[:, None], 1.0, 0)

    def test_non_positive_rate(self):
        with pytest.raises(ValueError):
            improper_integral(lambda s: np.ones((len(s), 1)), 0.0, 0)


class TestLarge:
    @pytest.mark.parametrize("k, expected", [(1, 1.0), (2, 2.0), (3, 6.0), (4, 24.0)])
    def test_yule_factorials(self, k, expected):
        m = yule()
        d = decompose_model(m)
        assert limit_large(m, d, [[1.0]] * k).top[0] == pytest.approx(expected, rel=1e-8)

    def test_singleton_is_projection(self):
        m, d, r = _setup("jordan")
        f = np.array([0.3, -0.7])
        prof = classify_function(d, r, f)
        assert np.allclose(limit_large(m, d, [f]).top, d.projector(prof.nu) @ f, atol=1e-9)

    def test_jordan_matches_twisted_ode(self):
        m, d, r = _setup("jordan")
        f = d.phi(0, 1, 0).real
        fs = [f, f]
        L = limit_large(m, d, fs).top
        prof = classify_function(d, r, f)
        t = np.array([25.0])
        tw = _twisted_moments(m, d, [fs], t, 1e-11, 1e-12)[0, 0]
        assert np.allclose(np.exp(-2 * prof.lam.real * t[0]) * tw, L, rtol=1e-3, atol=1e-6)

    def test_decoupled_cross_pair_vanishes(self):
        m, d, r = _setup("decoupled")
        e0 = np.array([1.0, 0.0])
        tab = limit_large(m, d, [e0, e0])
        # both copies sit on type 0, so the pair limit is supported there only
        assert abs(tab.top[1]) < 1e-12

    def test_rejects_small_function(self):
        m, d, r = _setup("coupled_small")
        v = d.phi(1, 0, 0)
        with pytest.raises(NotInRegime):
            limit_large(m, d, [v, v])

    def test_theorem_form_matches_ode(self):
        m, d, r = _setup("jordan")
        f = d.phi(0, 1, 0).real
        prof = classify_function(d, r, f)
        star = d.projector(prof.nu, 0) @ d.nil_power(prof.p - 1, f)
        L = large_theorem_limit(d, [prof, prof], limit_large(m, d, [star, star]))
        t = 200.0
        ode = moment_hierarchy(m, [f, f], [t]).at(t)
        scaled = np.exp(-2 * prof.lam.real * t) * (1 + t) ** (-(2 * prof.p - 2)) * ode
        # polynomial corrections decay like 1/t
        assert np.allclose(scaled, L, rtol=0.02, atol=0.02 * np.abs(L).max())

    @given(st.floats(0.2, 3.0), st.floats(-2.0, 2.0).filter(lambda x: abs(x) > 1e-3))
    def test_scaling_is_multilinear(self, a, b):
        m = yule()
        d = decompose_model(m)
        base = limit_large(m, d, [[1.0], [1.0]]).top
        scaled = limit_large(m, d, [[a], [b]]).top
        assert scaled == pytest.approx(a * b * base, rel=1e-8, abs=1e-12)


class TestSmall:
    def test_pair_matches_ode(self):
        m, d, r = _setup("coupled_small")
        v = d.phi(1, 0, 0).real
        L = limit_small(m, d, [v, v]).top
        t = 15.0
        tab = moment_hierarchy(m, [v, v], [t])
        scaled = np.exp(-d.lambda1 * t) * tab.at(t)
        assert np.allclose(scaled, L, rtol=5e-3, atol=5e-3)

    def test_odd_subsets_vanish(self):
        m, d, r = _setup("coupled_small")
        v = d.phi(1, 0, 0)
        tab = limit_small(m, d, [v, v, v])
        assert np.all(tab.top == 0)
        assert np.all(tab[(0,)] == 0)

    def test_four_copies(self):
        m, d, r = _setup("coupled_small")
        v = d.phi(1, 0, 0)
        tab = limit_small(m, d, [v] * 4)
        assert np.allclose(tab.top, [8.0, 0.0], atol=1e-7)

    def test_even_recursion_matches_resolvent(self):
        m, d, r = _setup("coupled_small")
        v = d.phi(1, 0, 0)
        tab = limit_small(m, d, [v] * 4)
        closed = even_recursion_resolvent(m, d, tab, tab.full)
        assert np.allclose(tab.top, closed, atol=1e-8)

    def test_four_copies_match_ode(self):
        m, d, r = _setup("coupled_small")
        v = d.phi(1, 0, 0).real
        t = 20.0
        tab = moment_hierarchy(m, [v] * 4, [t])
        scaled = np.exp(-2 * d.lambda1 * t) * tab.at(t)
        assert np.allclose(scaled, limit_small(m, d, [v] * 4).top, rtol=1e-3, atol=1e-3)

    def test_star_agrees_when_p1_is_one(self):
        m, d, r = _setup("coupled_small")
        v = d.phi(1, 0, 0)
        assert np.allclose(limit_small_star(m, d, [v, v]), limit_small(m, d, [v, v]).top, atol=1e-8)

    def test_conventions_agree_for_simple_lambda1(self):
        m, d, r = _setup("coupled_small")
        v = d.phi(1, 0, 0)
        a = limit_small(m, d, [v, v], convention="consistent").top
        b = limit_small(m, d, [v, v], convention="as-printed").top
        assert np.allclose(a, b)

    def test_unknown_convention(self):
        m, d, r = _setup("coupled_small")
        v = d.phi(1, 0, 0)
        with pytest.raises(ValueError):
            limit_small(m, d, [v, v], convention="nope")

    def test_pair_is_symmetric_under_swap(self):
        m, d, r = _setup("coupled_small")
        v = d.phi(1, 0, 0)
        w = 0.5 * v
        assert np.allclose(limit_small(m, d, [v, w]).top, limit_small(m, d, [w, v]).top)


class TestCritical:
    def test_rotation_conjugate_pair_matches_ode(self):
        m, d, r = _setup("rotation")
        idx = r.indices("critical")
        f, g = d.phi(idx[0], 0, 0), d.phi(idx[1], 0, 0)
        tab = limit_critical(m, d, [f, g])
        beta = critical_exponent(d, [classify_function(d, r, h) for h in (f, g)])
        assert beta == 1
        t = 20.0
        ode = moment_hierarchy(m, [f, g], [t]).at(t)
        scaled = np.exp(-d.lambda1 * t) * (1 + t) ** (-beta) * ode
        rel = np.abs(scaled - tab.top).max() / np.abs(tab.top).max()
        assert rel < 0.05

    def test_rotation_non_conjugate_pair_vanishes(self):
        m, d, r = _setup("rotation")
        idx = r.indices("critical")
        f = d.phi(idx[0], 0, 0)
        tab = limit_critical(m, d, [f, f])
        assert np.all(tab.top == 0)
        ode = moment_hierarchy(m, [f, f], [20.0]).at(20.0)
        assert np.abs(np.exp(-d.lambda1 * 20.0) * ode).max() < 1e-8

    def test_conjugation_symmetry(self):
        m, d, r = _setup("rotation")
        idx = r.indices("critical")
        f, g = d.phi(idx[0], 0, 0), d.phi(idx[1], 0, 0)
        a = limit_critical(m, d, [f, g]).top
        b = limit_critical(m, d, [np.conj(g), np.conj(f)]).top
        assert np.allclose(np.conj(a), b, atol=1e-10)

    @pytest.mark.parametrize("alpha, expected", [(0, 0.0625), (1, 0.125)])
    def test_alpha_dependence(self, alpha, expected):
        # lambda1 = 1 carries a 2x2 Jordan block which the critical state feeds
        m = from_mean([[2.0, 1, 0], [0, 2, 1], [0, 0, 1.5]], [1.0, 1, 1])
        d = decompose_model(m)
        r = classify_regimes(d)
        f = d.phi(1, 0, 0)
        f = f / np.abs(f).max()
        tab = limit_critical(m, d, [f, f], alpha=alpha)
        assert tab.top[0] == pytest.approx(expected, abs=1e-9)
        assert np.allclose(tab.top[1:], 0, atol=1e-12)
        beta = critical_exponent(d, [classify_function(d, r, f)] * 2, alpha)
        t = 640.0
        ode = moment_hierarchy(m, [f, f], [t]).at(t)
        Nm = np.linalg.matrix_power(d.nilpotent, alpha)
        scaled = np.exp(-t) * (1 + t) ** (-beta) * (Nm @ ode)
        # the normalised moment approaches its limit at rate 1/t
        assert scaled[0] == pytest.approx(expected, rel=0.02)

    def test_alpha_out_of_range(self):
        m, d, r = _setup("rotation")
        f = d.phi(r.indices("critical")[0], 0, 0)
        with pytest.raises(ValueError):
            limit_critical(m, d, [f, f], alpha=1)

    def test_rejects_large_function(self):
        m, d, r = _setup("rotation")
        with pytest.raises(NotInRegime):
            limit_critical(m, d, [d.phi(0, 0, 0)] * 2)
