"""Mollification kernels and the two smoothing operators.

Gaussian mode implements the rotated Ornstein-Uhlenbeck averaging

    T_eps f(x)   = int f(x_eps) rho(y) dgamma(y),
    x_eps = a x + s y,    a = exp(-eps),  s = sqrt(1 - exp(-2 eps)),

together with its L^2 adjoint

    T_eps^* f(x) = int f(x^eps) rho(y^eps) dgamma(y),
    x^eps = a x - s y,    y^eps = s x + a y.

The pair (x_eps, y_eps) with y_eps = -s x + a y is a rotation of R^{2N}
preserving gamma (x) gamma, and (x^eps, y^eps) is its inverse; the constant
C_eps = exp(eps) * s = sqrt(exp(2 eps) - 1) shows up in every integration by
parts and behaves like sqrt(2 eps) as eps -> 0.

Lebesgue mode implements plain convolution f * rho_eps with a compactly
supported kernel, by tensor Gauss-Legendre quadrature over the support.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .gauss import Array, GaussianSpace, expect, sample_gaussian

TimeScalarField = Callable[[float, Array], Array]   # (t, (m, dim)) -> (m,)


class KernelValidationError(ValueError):
    def __init__(self, report: "KernelReport"):
        self.report = report
        super().__init__(f"kernel failed validation: {report}")


@dataclass(frozen=True)
class Mollifier:
    """Nonnegative unit-mass kernel with closed-form gradient.

    ``mass`` is the declared gamma-mass (gaussian mode) or Lebesgue mass;
    ``sup_rho``/``sup_grad_rho`` are sup-norm bounds used by the error-term
    formulas.  When no analytic bound exists (flow-averaged kernels are
    unbounded on all of R^N) the constructor stores an empirical sup over a
    seeded gamma sample, and ``sup_is_empirical`` records that.
    """

    dim: int
    rho: Callable[[Array], Array]
    grad_rho: Callable[[Array], Array]
    mode: str = "gaussian"            # "gaussian" | "lebesgue"
    mass: float = 1.0
    sup_rho: float = 1.0
    sup_grad_rho: float = 0.0
    support_radius: float = np.inf
    sup_is_empirical: bool = False
    name: str = "kernel"
    mass_fn: Callable[[GaussianSpace], "tuple[float, float]"] | None = None
    # optional fused (rho, grad_rho) evaluation; kernels whose value and
    # gradient share expensive intermediates install it
    rho_grad_fn: Callable[[Array], "tuple[Array, Array]"] | None = None

    def rho_and_grad(self, pts: Array) -> tuple[Array, Array]:
        if self.rho_grad_fn is not None:
            return self.rho_grad_fn(pts)
        return np.asarray(self.rho(pts)), np.asarray(self.grad_rho(pts))

    def mass_estimate(self, space: GaussianSpace) -> tuple[float, float]:
        """(mass, std_error) measured with the space's engine.

        Kernels may install ``mass_fn`` (a finite-variance importance
        estimator, used by flow-averaged kernels whose direct quadrature is
        ill-conditioned at large horizons).
        """
        if self.mass_fn is not None:
            return self.mass_fn(space)
        if self.mode == "lebesgue":
            val = _lebesgue_mass(self, order=64)
            return val, 0.0
        est = expect(space, self.rho)
        return est.value, est.std_error


@dataclass(frozen=True)
class KernelReport:
    nonneg_ok: bool
    min_sampled: float
    mass: float
    mass_std_error: float
    mass_ok: bool
    grad_ok: bool
    max_grad_deviation: float

    @property
    def passed(self) -> bool:
        return self.nonneg_ok and self.mass_ok and self.grad_ok


@dataclass(frozen=True)
class OUParams:
    """Rotation parameters at smoothing scale eps > 0."""

    eps: float

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be > 0")

    @property
    def a(self) -> float:
        return float(np.exp(-self.eps))

    @property
    def s(self) -> float:
        return float(np.sqrt(1.0 - np.exp(-2.0 * self.eps)))

    @property
    def c_eps(self) -> float:
        return float(np.exp(self.eps) * self.s)


def rotation_constant(s: Array | float) -> Array | float:
    """C_s = exp(s) * sqrt(1 - exp(-2s)) = sqrt(exp(2s) - 1)."""
    return np.sqrt(np.expm1(2.0 * np.asarray(s, dtype=float)))


def rotate(p: OUParams, x: Array, y: Array) -> tuple[Array, Array]:
    """(x_eps, y_eps): the gamma (x) gamma preserving rotation."""
    return p.a * x + p.s * y, -p.s * x + p.a * y


def rotate_inv(p: OUParams, x: Array, y: Array) -> tuple[Array, Array]:
    """(x^eps, y^eps): inverse rotation, used by the adjoint operator."""
    return p.a * x - p.s * y, p.s * x + p.a * y


def validate_kernel(m: Mollifier, space: GaussianSpace,
                    n_samples: int = 10_000, fd_step: float = 1e-5,
                    mass_tol: float = 1e-8) -> KernelReport:
    """Check nonnegativity, unit mass and gradient consistency.

    Nonnegativity is sampled at ``n_samples`` gamma points (or uniform
    points on the support in Lebesgue mode); the mass check allows 4 std
    errors on top of ``mass_tol`` when measured by Monte Carlo; the
    gradient is compared with central finite differences at 20 points.
    """
    rng = space.rng(23)
    if m.mode == "lebesgue":
        R = m.support_radius
        pts = rng.uniform(-R, R, size=(n_samples, m.dim))
    else:
        pts = sample_gaussian(space, n_samples, stream=23)
    vals = np.asarray(m.rho(pts))
    min_sampled = float(vals.min())
    nonneg_ok = bool(min_sampled >= -1e-12)

    mass, mass_se = m.mass_estimate(space)
    mass_ok = bool(abs(mass - 1.0) <= mass_tol + 4.0 * mass_se)

    check_pts = pts[:20]
    grad = np.asarray(m.grad_rho(check_pts))
    fd = np.empty_like(grad)
    for j in range(m.dim):
        e = np.zeros(m.dim)
        e[j] = fd_step
        fd[:, j] = (np.asarray(m.rho(check_pts + e))
                    - np.asarray(m.rho(check_pts - e))) / (2.0 * fd_step)
    scale = np.maximum(np.abs(grad), 1.0)
    max_dev = float(np.abs(grad - fd).max() / scale.max())
    grad_ok = bool(max_dev < 1e-5)

    return KernelReport(nonneg_ok, min_sampled, float(mass), float(mass_se),
                        mass_ok, grad_ok, max_dev)


def require_valid_kernel(m: Mollifier, space: GaussianSpace) -> None:
    report = validate_kernel(m, space)
    if not report.passed:
        raise KernelValidationError(report)


def apply_teps(m: Mollifier, p: OUParams, f: TimeScalarField, t: float,
               x: Array, space: GaussianSpace) -> float:
    """Smoothed value ``int f(t, a x + s y) rho(y) dgamma(y)`` at one point."""
    if m.mode != "gaussian":
        raise ValueError("apply_teps requires a gaussian-mode kernel")
    x = np.asarray(x, dtype=float)

    def integrand(ys):
        return np.asarray(f(t, p.a * x[None, :] + p.s * ys)) * np.asarray(m.rho(ys))

    return expect(space, integrand).value


def apply_teps_adjoint(m: Mollifier, p: OUParams, f: TimeScalarField, t: float,
                       x: Array, space: GaussianSpace) -> float:
    """Adjoint smoothing ``int f(t, x^eps) rho(y^eps) dgamma(y)``."""
    if m.mode != "gaussian":
        raise ValueError("apply_teps_adjoint requires a gaussian-mode kernel")
    x = np.asarray(x, dtype=float)

    def integrand(ys):
        xe, ye = rotate_inv(p, x[None, :], ys)
        return np.asarray(f(t, xe)) * np.asarray(m.rho(ye))

    return expect(space, integrand).value


def apply_conv(m: Mollifier, eps: float, f: Callable[[Array], Array],
               x: Array) -> float:
    """Convolution ``int f(x - eps y) rho(y) dy`` over the compact support."""
    if m.mode != "lebesgue":
        raise ValueError("apply_conv requires a lebesgue-mode kernel")
    if not np.isfinite(m.support_radius):
        raise ValueError("lebesgue kernels need a finite support radius")
    x = np.asarray(x, dtype=float)
    pts, wts = _legendre_grid(m.dim, m.support_radius, order=64)
    vals = np.asarray(f(x[None, :] - eps * pts)) * np.asarray(m.rho(pts))
    return float(wts @ vals)


def _legendre_grid(dim: int, radius: float, order: int) -> tuple[Array, Array]:
    z, w = np.polynomial.legendre.leggauss(order)
    z = radius * z
    w = radius * w
    grids = np.meshgrid(*([z] * dim), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    wts = np.ones(order**dim)
    for g in np.meshgrid(*([w] * dim), indexing="ij"):
        wts = wts * g.ravel()
    return pts, wts


def _lebesgue_mass(m: Mollifier, order: int) -> float:
    pts, wts = _legendre_grid(m.dim, m.support_radius, order)
    return float(wts @ np.asarray(m.rho(pts)))


# ---------------------------------------------------------------------------
# kernel library
# ---------------------------------------------------------------------------

def unit_kernel(dim: int) -> Mollifier:
    """rho == 1: the plain Ornstein-Uhlenbeck average (gamma-mass 1)."""
    return Mollifier(
        dim=dim,
        rho=lambda pts: np.ones(pts.shape[0]),
        grad_rho=lambda pts: np.zeros((pts.shape[0], dim)),
        mode="gaussian",
        mass=1.0,
        sup_rho=1.0,
        sup_grad_rho=0.0,
        name="const",
    )


def hermite_quadratic_kernel(dim: int, alphas) -> Mollifier:
    """rho(y) = 1 + sum_i alpha_i (y_i^2 - 1), gamma-mass 1 exactly.

    Requires sum(max(alpha_i, 0)) < 1 so the kernel stays positive.
    The sup norms are unbounded; empirical values over a fixed sample are
    stored for reporting.
    """
    alphas = np.asarray(alphas, dtype=float)
    if alphas.size != dim:
        raise ValueError("need one coefficient per coordinate")
    if np.maximum(-alphas, 0.0).sum() >= 1.0:
        raise ValueError("kernel would change sign")

    def rho(pts):
        return 1.0 + (pts * pts - 1.0) @ alphas

    def grad(pts):
        return 2.0 * pts * alphas

    sample = np.random.Generator(np.random.Philox(np.random.SeedSequence(2024))) \
        .standard_normal((10_000, dim))
    return Mollifier(
        dim=dim, rho=rho, grad_rho=grad, mode="gaussian", mass=1.0,
        sup_rho=float(np.abs(rho(sample)).max()),
        sup_grad_rho=float(np.linalg.norm(grad(sample), axis=1).max()),
        sup_is_empirical=True,
        name=f"hermite2({np.array2string(alphas, precision=3)})",
    )


def bump_kernel(dim: int, radius: float = 1.0) -> Mollifier:
    """Normalized smooth bump on the cube [-radius, radius]^dim (Lebesgue)."""

    def raw(pts):
        z = pts / radius
        inside = np.all(np.abs(z) < 1.0, axis=1)
        out = np.zeros(pts.shape[0])
        zi = z[inside]
        out[inside] = np.exp(np.sum(-1.0 / (1.0 - zi * zi), axis=1))
        return out

    probe = Mollifier(dim=dim, rho=raw,
                      grad_rho=lambda pts: np.zeros_like(pts),
                      mode="lebesgue", support_radius=radius)
    norm = _lebesgue_mass(probe, order=128)

    def rho(pts):
        return raw(pts) / norm

    def grad(pts):
        z = pts / radius
        inside = np.all(np.abs(z) < 1.0, axis=1)
        out = np.zeros_like(pts)
        zi = z[inside]
        # d/dz exp(-1/(1-z^2)) = exp(.) * (-2z/(1-z^2)^2)
        out[inside] = (raw(pts[inside]) / norm)[:, None] * \
            (-2.0 * zi / (1.0 - zi * zi) ** 2) / radius
        return out

    sup = 1.0 / norm * np.exp(-dim)
    grid = np.linspace(-radius * (1 - 1e-9), radius * (1 - 1e-9), 2001)
    if dim == 1:
        gvals = np.abs(grad(grid[:, None])).max()
    else:
        gvals = None
    return Mollifier(
        dim=dim, rho=rho, grad_rho=grad, mode="lebesgue", mass=1.0,
        sup_rho=float(sup),
        sup_grad_rho=float(gvals) if gvals is not None else np.nan,
        support_radius=radius, sup_is_empirical=dim > 1,
        name=f"bump(r={radius})",
    )
