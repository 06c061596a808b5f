"""Reference-measure engine: determinism, moments, quadrature/MC agreement."""

import numpy as np
import pytest
from scipy.integrate import quad

from renorm_lab.gauss import (Estimate, GaussianSpace, NonFiniteIntegrandError,
                              expect, gauss_density, sample_gaussian,
                              split_gauss_rule_1d, split_normal_rule,
                              tensor_rule)

# independent 1D adaptive-quadrature oracle for E|1 - Z^2|; the closed form
# 4 phi(1) agrees with it to 1e-12
ABS_ONE_MINUS_SQ = quad(lambda z: abs(1 - z * z) * np.exp(-z * z / 2)
                        / np.sqrt(2 * np.pi), -12, 12, limit=400)[0]


def test_oracle_matches_closed_form():
    assert ABS_ONE_MINUS_SQ == pytest.approx(4 * np.exp(-0.5) / np.sqrt(2 * np.pi),
                                             abs=1e-12)


def test_sampling_is_deterministic():
    sp = GaussianSpace(dim=1, seed=7)
    a = sample_gaussian(sp, 3)
    b = sample_gaussian(sp, 3)
    assert np.array_equal(a, b)
    # leading block stability
    c = sample_gaussian(sp, 10)
    assert np.array_equal(c[:3], a)
    # different seed, different stream
    assert not np.array_equal(sample_gaussian(GaussianSpace(dim=1, seed=8), 3), a)


def test_sample_moments():
    n = 100_000
    sp = GaussianSpace(dim=3, seed=123)
    x = sample_gaussian(sp, n)
    assert np.abs(x.mean(axis=0)).max() < 3.0 / np.sqrt(n)
    # variance of the sample variance of n normals is 2/(n-1)
    s2 = x.var(axis=0, ddof=1)
    assert np.abs(s2 - 1.0).max() < 3.0 * np.sqrt(2.0 / (n - 1))


def test_expect_normalization_and_variance():
    sp = GaussianSpace(dim=2, quad_order=5)
    one = expect(sp, lambda p: np.ones(p.shape[0]))
    assert one.value == pytest.approx(1.0, abs=1e-14)
    assert one.std_error == 0.0 and one.method == "quadrature"
    var = expect(sp, lambda p: p[:, 0] ** 2)
    assert var.value == pytest.approx(1.0, abs=1e-12)


def test_expect_kink_integrand_against_oracle():
    sp = GaussianSpace(dim=2, quad_order=128)
    est = expect(sp, lambda p: np.abs(1.0 - p[:, 0] ** 2))
    assert est.value == pytest.approx(ABS_ONE_MINUS_SQ, abs=1e-2)
    mc = expect(GaussianSpace(dim=2, mc_budget=100_000, seed=5),
                lambda p: np.abs(1.0 - p[:, 0] ** 2), method="monte-carlo")
    assert abs(mc.value - ABS_ONE_MINUS_SQ) < 4 * mc.std_error


def test_quadrature_vs_monte_carlo_battery():
    battery = [
        lambda p: p[:, 0] ** 3 - 2 * p[:, 0] + 1.0,
        lambda p: np.tanh(p[:, 0] + 0.5 * p[:, 1]),
        lambda p: np.exp(-0.5 * np.einsum("mi,mi->m", p, p)),
        lambda p: np.abs(1.0 - p[:, 0] ** 2),
    ]
    spq = GaussianSpace(dim=2, quad_order=128)
    spm = GaussianSpace(dim=2, mc_budget=200_000, seed=17)
    for f in battery:
        q = expect(spq, f)
        m = expect(spm, f, method="monte-carlo")
        assert q.agrees_with(m, k=4.0), (q, m)


def test_expect_linearity_quadrature():
    sp = GaussianSpace(dim=2, quad_order=20)
    f = lambda p: np.sin(p[:, 0])
    g = lambda p: p[:, 1] ** 2
    lhs = expect(sp, lambda p: 2.5 * f(p) - 1.25 * g(p)).value
    rhs = 2.5 * expect(sp, f).value - 1.25 * expect(sp, g).value
    assert lhs == pytest.approx(rhs, abs=1e-14)


def test_rotational_invariance():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((3, 3))
    R, _ = np.linalg.qr(A)
    sp = GaussianSpace(dim=3, quad_order=24)
    f = lambda p: np.exp(-0.3 * np.einsum("mi,mi->m", p, p)) \
        * (1.0 + np.tanh(p[:, 0]))
    direct = expect(sp, f).value
    rotated = expect(sp, lambda p: f(p @ R.T)).value
    assert rotated == pytest.approx(direct, abs=1e-8)


def test_gauss_density_values_and_decay():
    sp1 = GaussianSpace(dim=1)
    assert gauss_density(sp1, np.zeros(1)) == pytest.approx(0.3989422804014327,
                                                            abs=1e-10)
    sp2 = GaussianSpace(dim=2)
    assert gauss_density(sp2, np.zeros(2)) == pytest.approx(0.1591549431,
                                                            abs=1e-9)
    xs = np.linspace(0, 8, 30)[:, None]
    vals = gauss_density(sp1, xs)
    assert np.all(np.diff(vals) < 0)


def test_non_finite_integrand_reports_point():
    sp = GaussianSpace(dim=1, quad_order=8)

    def bad(p):
        out = np.ones(p.shape[0])
        out[p[:, 0] > 1.0] = np.nan
        return out

    with pytest.raises(NonFiniteIntegrandError) as err:
        expect(sp, bad)
    assert err.value.point[0] > 1.0


def test_invalid_space_parameters():
    for kw in (dict(dim=0), dict(dim=1, quad_order=1), dict(dim=1, mc_budget=0)):
        with pytest.raises(ValueError):
            GaussianSpace(**kw)


def test_split_rule_handles_kinks_exactly():
    z, w = split_gauss_rule_1d(24, (0.0,))
    assert w.sum() == pytest.approx(1.0, abs=1e-10)
    assert np.abs(z) @ w == pytest.approx(np.sqrt(2.0 / np.pi), abs=1e-10)
    # |z - c| kink off the origin
    z, w = split_gauss_rule_1d(24, (0.7,))
    oracle = quad(lambda t: abs(t - 0.7) * np.exp(-t * t / 2)
                  / np.sqrt(2 * np.pi), -12, 12)[0]
    assert np.abs(z - 0.7) @ w == pytest.approx(oracle, abs=1e-10)


def test_split_normal_rule_matches_tensor_on_smooth():
    nu = np.array([1.0, 1.0]) / np.sqrt(2.0)
    pts, wts = split_normal_rule(2, nu, (0.3,), order_par=24, order_perp=20)
    f = lambda p: np.exp(0.2 * p[:, 0] - 0.1 * p[:, 1] ** 2)
    ref_pts, ref_w = tensor_rule(2, 40)
    assert f(pts) @ wts == pytest.approx(f(ref_pts) @ ref_w, abs=1e-9)


def test_estimate_helpers():
    a = Estimate(1.0, 0.1, "monte-carlo")
    b = Estimate(1.35, 0.05, "monte-carlo")
    assert a.combined_std_error(b) == pytest.approx(np.hypot(0.1, 0.05))
    assert a.agrees_with(b, k=4.0)
    assert not a.agrees_with(Estimate(2.0, 0.05, "monte-carlo"), k=4.0)
    with pytest.raises(ValueError):
        Estimate(1.0, -0.1)
