"""Kernels and the two smoothing operators against closed-form oracles."""

import numpy as np
import pytest
from scipy.integrate import quad

from renorm_lab.gauss import GaussianSpace, expect, tensor_rule
from renorm_lab.mollifier import (KernelValidationError, Mollifier, OUParams,
                                  apply_conv, apply_teps, apply_teps_adjoint,
                                  bump_kernel, hermite_quadratic_kernel,
                                  require_valid_kernel, rotate, rotate_inv,
                                  rotation_constant, unit_kernel,
                                  validate_kernel)

SP = GaussianSpace(dim=2, quad_order=24, seed=2)


def _teps_batch(m, p, f, xs, space):
    """Vectorized gaussian-mode smoothing over a batch of base points."""
    ys, wy = tensor_rule(space.dim, space.quad_order)
    xe = p.a * xs[:, None, :] + p.s * ys[None, :, :]
    flat = xe.reshape(-1, space.dim)
    vals = (np.asarray(f(flat)).reshape(xs.shape[0], -1)
            * np.asarray(m.rho(ys))[None, :])
    return vals @ wy


def test_ou_params_identities():
    for eps in (0.01, 0.2, 1.0, 3.0):
        p = OUParams(eps)
        assert p.a ** 2 + p.s ** 2 == pytest.approx(1.0, abs=1e-14)
        assert p.c_eps == pytest.approx(p.s / p.a, rel=1e-13)
        assert rotation_constant(eps) == pytest.approx(p.c_eps, rel=1e-13)
    with pytest.raises(ValueError):
        OUParams(0.0)


def test_rotation_maps_are_mutually_inverse():
    p = OUParams(0.37)
    rng = np.random.default_rng(4)
    x, y = rng.standard_normal((2, 5, 2))
    xe, ye = rotate_inv(p, x, y)
    xb, yb = rotate(p, xe, ye)
    assert np.allclose(xb, x) and np.allclose(yb, y)


def test_c_eps_asymptotics():
    # C_eps / sqrt(2 eps) -> 1 from above as eps -> 0
    ratios = [rotation_constant(e) / np.sqrt(2 * e)
              for e in (0.1, 0.01, 0.001, 1e-5)]
    assert all(r2 < r1 for r1, r2 in zip(ratios, ratios[1:]))
    assert ratios[-1] == pytest.approx(1.0, abs=1e-5)


def test_validate_kernel_examples():
    assert validate_kernel(unit_kernel(2), SP).passed
    # un-normalized bump: mass fails
    raw = bump_kernel(1, radius=1.0)
    bad_mass = Mollifier(dim=1, rho=lambda p: 3.0 * np.asarray(raw.rho(p)),
                         grad_rho=lambda p: 3.0 * np.asarray(raw.grad_rho(p)),
                         mode="lebesgue", support_radius=1.0)
    rep = validate_kernel(bad_mass, GaussianSpace(dim=1, quad_order=16))
    assert not rep.mass_ok and not rep.passed
    # sign-changing kernel: nonnegativity fails
    bad_sign = Mollifier(dim=2, rho=lambda p: 1.0 - p[:, 1] ** 2 / 0.5,
                         grad_rho=lambda p: np.stack(
                             [np.zeros(p.shape[0]), -2.0 * p[:, 1] / 0.5],
                             axis=1))
    rep = validate_kernel(bad_sign, SP)
    assert not rep.nonneg_ok and not rep.passed
    with pytest.raises(KernelValidationError):
        require_valid_kernel(bad_sign, SP)


def test_apply_teps_constant_and_linear():
    m = unit_kernel(2)
    p = OUParams(0.4)
    f_lin = lambda t, pts: pts[:, 0]
    f_const = lambda t, pts: np.full(pts.shape[0], 3.25)
    for xv in ([1.0, 0.0], [-0.4, 2.0]):
        x = np.array(xv)
        assert apply_teps(m, p, f_lin, 0.0, x, SP) \
            == pytest.approx(p.a * x[0], abs=1e-12)
        assert apply_teps(m, p, f_const, 0.0, x, SP) \
            == pytest.approx(3.25, abs=1e-12)


def test_apply_teps_squares_mehler_oracle():
    # closed form e^{-2 eps} x^2 + (1 - e^{-2 eps}) on the first coordinate,
    # cross-checked against a fine 1D quadrature oracle
    m = unit_kernel(2)
    p = OUParams(0.5)
    f = lambda t, pts: pts[:, 0] ** 2

    def oracle(x1):
        return quad(lambda y: (p.a * x1 + p.s * y) ** 2
                    * np.exp(-y * y / 2) / np.sqrt(2 * np.pi), -12, 12)[0]

    val1 = apply_teps(m, p, f, 0.0, np.array([1.0, 0.0]), SP)
    assert val1 == pytest.approx(np.exp(-1.0) + (1 - np.exp(-1.0)), abs=1e-12)
    assert val1 == pytest.approx(oracle(1.0), abs=1e-10)
    val2 = apply_teps(m, p, f, 0.0, np.array([2.0, 0.0]), SP)
    assert val2 == pytest.approx(3 * np.exp(-1.0) + 1.0, abs=1e-12)
    assert val2 == pytest.approx(oracle(2.0), abs=1e-10)


def test_apply_teps_hermite_kernel_closed_form():
    alpha = 0.3
    m = hermite_quadratic_kernel(2, [alpha, 0.0])
    p = OUParams(0.5)
    f = lambda t, pts: pts[:, 0] ** 2
    x = np.array([2.0, 0.0])
    expected = p.a ** 2 * 4.0 + p.s ** 2 * (1.0 + 2.0 * alpha)
    assert apply_teps(m, p, f, 0.0, x, SP) == pytest.approx(expected, abs=1e-10)


def test_adjoint_matches_teps_for_unit_kernel():
    m = unit_kernel(2)
    p = OUParams(0.3)
    fs = [lambda t, pts: np.tanh(pts[:, 0]),
          lambda t, pts: pts[:, 0] ** 2 - pts[:, 1],
          lambda t, pts: np.exp(-0.2 * np.einsum("mi,mi->m", pts, pts))]
    rng = np.random.default_rng(9)
    for f in fs:
        for x in rng.standard_normal((3, 2)):
            assert apply_teps_adjoint(m, p, f, 0.0, x, SP) \
                == pytest.approx(apply_teps(m, p, f, 0.0, x, SP), abs=1e-10)


def test_adjoint_mass_convergence():
    alpha = 0.25
    m = hermite_quadratic_kernel(2, [alpha, 0.0])
    one = lambda t, pts: np.ones(pts.shape[0])
    x = np.array([0.8, -0.3])
    vals = [apply_teps_adjoint(m, OUParams(e), one, 0.0, x, SP)
            for e in (0.4, 0.2, 0.05, 0.01)]
    # closed form: 1 + alpha s^2 (x1^2 - 1) -> 1
    for e, v in zip((0.4, 0.2, 0.05, 0.01), vals):
        s2 = 1 - np.exp(-2 * e)
        assert v == pytest.approx(1 + alpha * s2 * (x[0] ** 2 - 1), abs=1e-10)
    assert abs(vals[-1] - 1.0) < 1e-2


def test_duality_pairing():
    # <T_eps f, g> == <f, T_eps^* g> for random smooth pairs, within 1e-6
    p = OUParams(0.35)
    rng = np.random.default_rng(21)
    kernels = [unit_kernel(2), hermite_quadratic_kernel(2, [0.2, -0.1])]
    sp = GaussianSpace(dim=2, quad_order=20, seed=2)
    xs, wx = tensor_rule(2, 20)
    for m in kernels:
        for _ in range(5):
            c = rng.standard_normal(3) * 0.5

            def f(t, pts):
                return np.tanh(c[0] * pts[:, 0] + c[1] * pts[:, 1])

            def g(t, pts):
                return np.exp(-0.3 * np.einsum("mi,mi->m", pts, pts)) \
                    + c[2] * pts[:, 0]

            Tf = _teps_batch(m, p, lambda q: f(0, q), xs, sp)
            lhs = float(wx @ (Tf * g(0, xs)))
            Tg = np.array([apply_teps_adjoint(m, p, g, 0.0, x, sp) for x in xs])
            rhs = float(wx @ (f(0, xs) * Tg))
            assert lhs == pytest.approx(rhs, abs=1e-6)


def test_contraction_in_l1():
    p = OUParams(0.25)
    sp = GaussianSpace(dim=2, quad_order=24, seed=2)
    xs, wx = tensor_rule(2, 24)
    fs = [lambda q: np.abs(q[:, 0]), lambda q: np.tanh(q[:, 0]) + 0.5,
          lambda q: q[:, 0] ** 2]
    for m in (unit_kernel(2), hermite_quadratic_kernel(2, [0.3, 0.0])):
        for f in fs:
            Tf = _teps_batch(m, p, f, xs, sp)
            lhs = float(wx @ np.abs(Tf))
            rhs = m.sup_rho * float(wx @ np.abs(f(xs)))
            assert lhs <= rhs * (1 + 1e-9) + 1e-12


def test_unit_kernel_lp_contraction():
    p = OUParams(0.25)
    sp = GaussianSpace(dim=2, quad_order=24, seed=2)
    xs, wx = tensor_rule(2, 24)
    f = lambda q: np.tanh(q[:, 0]) * q[:, 1]
    Tf = _teps_batch(unit_kernel(2), p, f, xs, sp)
    for pw in (1.0, 2.0, 4.0):
        assert float(wx @ np.abs(Tf) ** pw) \
            <= float(wx @ np.abs(f(xs)) ** pw) * (1 + 1e-9)


def test_strong_convergence_monotone():
    sp = GaussianSpace(dim=2, quad_order=24, seed=2)
    xs, wx = tensor_rule(2, 24)
    f = lambda q: np.tanh(q[:, 0]) + 0.3 * q[:, 1] ** 2
    for m in (unit_kernel(2), hermite_quadratic_kernel(2, [0.2, 0.1])):
        errs = []
        for eps in (0.2, 0.1, 0.05, 0.025):
            Tf = _teps_batch(m, OUParams(eps), f, xs, sp)
            errs.append(np.sqrt(float(wx @ (Tf - f(xs) * m.mass) ** 2)))
        assert all(e2 < e1 for e1, e2 in zip(errs, errs[1:])), errs
        assert errs[-1] < 0.25 * errs[0]


def test_apply_conv_examples():
    m = bump_kernel(1, radius=1.0)
    assert validate_kernel(m, GaussianSpace(dim=1, quad_order=16)).passed
    f_lin = lambda pts: 2.0 * pts[:, 0] + 1.0
    for xv, eps in ((0.3, 0.1), (-1.2, 0.05)):
        assert apply_conv(m, eps, f_lin, np.array([xv])) \
            == pytest.approx(2.0 * xv + 1.0, abs=1e-10)
    f_const = lambda pts: np.full(pts.shape[0], -0.75)
    assert apply_conv(m, 0.1, f_const, np.array([0.2])) \
        == pytest.approx(-0.75, abs=1e-10)
    # f = x^2: value x^2 + eps^2 m2(rho), with m2 from a quadrature oracle
    m2 = quad(lambda y: y * y * m.rho(np.array([[y]]))[0], -1, 1)[0]
    f_sq = lambda pts: pts[:, 0] ** 2
    for xv in (0.0, 0.7):
        assert apply_conv(m, 0.1, f_sq, np.array([xv])) \
            == pytest.approx(xv ** 2 + 0.01 * m2, abs=1e-9)


def test_mode_mismatch_errors():
    with pytest.raises(ValueError):
        apply_conv(unit_kernel(1), 0.1, lambda p: p[:, 0], np.array([0.0]))
    with pytest.raises(ValueError):
        apply_teps(bump_kernel(1), OUParams(0.1),
                   lambda t, p: p[:, 0], 0.0, np.array([0.0]),
                   GaussianSpace(dim=1))
