"""Exact continuity-equation solutions for linear drifts, via exponential flows.

For a square matrix M and the linear field ``y -> M y``, the continuity
equation ``d/dt u_t + div_gamma(M y u_t) = 0`` with ``u_0 = 1`` is solved by
the density of the pushforward of gamma under ``X(t, x) = exp(tM) x``:

    u_t(X(t, x)) = |det2(I + E_t)|^(-1) * exp[ div(E_t x) + |E_t x|^2 / 2 ],

with ``E_t = exp(tM) - I`` and ``det2(I + C) = det(I + C) exp(-Tr C)`` the
Carleman-Fredholm determinant.

Sign calibration.  The symbol ``div(Cx)`` inside the change-of-variables
exponent is ``<Cx, x> - Tr C``, i.e. the negative of the Gaussian divergence
used for fields elsewhere in this package.  The 1D pushforward oracle fixes
this: with C = c the density of ``x -> (1+c)x`` pushforward at ``(1+c)x``
equals ``phi(x) / ((1+c) phi((1+c)x))``, which matches the display above only
with that sign, and it is the unique choice making

    int |det2(I + C)| exp[-div(Cx) - |Cx|^2/2] dgamma = 1

hold exactly (tests verify both).  The exponent also collapses to the
overflow-safe form ``log u_t(y) = |y|^2/2 - |exp(-tM) y|^2/2 - t Tr M``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from .gauss import Array, Estimate, GaussianSpace, expect


@dataclass(frozen=True)
class HSMatrix:
    """Square matrix with its Hilbert-Schmidt (Frobenius) norm cached."""

    m: Array
    hs_norm: float = 0.0

    def __post_init__(self):
        m = np.array(self.m, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("expected a square matrix")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "hs_norm", float(np.linalg.norm(m)))

    @property
    def dim(self) -> int:
        return self.m.shape[0]


def hs(matrix: Sequence[Sequence[float]]) -> HSMatrix:
    return HSMatrix(np.asarray(matrix, dtype=float))


def cf_det(C: HSMatrix | Array) -> float:
    """Carleman-Fredholm determinant ``det(I + C) * exp(-Tr C)``.

    May be zero or negative; callers take absolute values as needed.
    """
    C = C.m if isinstance(C, HSMatrix) else np.asarray(C, dtype=float)
    eye = np.eye(C.shape[0])
    return float(np.linalg.det(eye + C) * np.exp(-np.trace(C)))


@dataclass(frozen=True)
class FlowSolution:
    """Exponential flow of a linear field at a fixed time.

    Caches exp(tM), exp(-tM) and the Carleman-Fredholm determinant of
    E_t = exp(tM) - I.  ``log_det2`` stores ``t Tr M - Tr E_t`` which equals
    log|det2(I + E_t)| exactly and never overflows.
    """

    matrix: HSMatrix
    t: float
    exp_tm: Array
    exp_neg_tm: Array
    det2: float
    log_det2: float

    @property
    def dim(self) -> int:
        return self.matrix.dim


def flow_solution(M: HSMatrix | Sequence[Sequence[float]], t: float) -> FlowSolution:
    """Build the flow caches at time t >= 0 (scaling-and-squaring Pade expm)."""
    if not isinstance(M, HSMatrix):
        M = hs(M)
    if t < 0:
        raise ValueError("t must be >= 0")
    A = t * M.m
    exp_tm = expm(A)
    exp_neg_tm = expm(-A)
    E = exp_tm - np.eye(M.dim)
    log_det2 = float(np.trace(A) - np.trace(E))
    with np.errstate(over="ignore"):
        det2 = float(np.exp(log_det2))  # inf is a faithful value at large t
    return FlowSolution(M, float(t), exp_tm, exp_neg_tm,
                        det2=det2, log_det2=log_det2)


def flow_map(fs: FlowSolution, x: Array) -> Array:
    """X(t, x) = exp(tM) x; accepts (dim,) or (m, dim)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return fs.exp_tm @ x
    return x @ fs.exp_tm.T


def gauss_div_linear(C: Array, pts: Array) -> Array:
    """Gaussian divergence Tr C - <Cx, x> of the linear field x -> Cx."""
    Cx = pts @ np.asarray(C).T
    return np.trace(np.asarray(C)) - np.einsum("mi,mi->m", Cx, pts)


def pushforward_density(C: HSMatrix | Array, x: Array) -> Array | float:
    """Density of ``(I + C)_# gamma`` w.r.t. gamma, evaluated at ``x + Cx``.

    Equals ``|det2(I + C)|^(-1) exp[div(Cx) + |Cx|^2/2]`` with the calibrated
    sign ``div(Cx) = <Cx, x> - Tr C``.  Raises for singular I + C.
    """
    Cm = C.m if isinstance(C, HSMatrix) else np.asarray(C, dtype=float)
    d = Cm.shape[0]
    if abs(np.linalg.det(np.eye(d) + Cm)) < 1e-300:
        raise ValueError("I + C is singular: pushforward density undefined")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = x[None, :] if single else x
    Cx = pts @ Cm.T
    div_cx = np.einsum("mi,mi->m", Cx, pts) - np.trace(Cm)
    vals = np.exp(div_cx + 0.5 * np.einsum("mi,mi->m", Cx, Cx)) \
        / abs(cf_det(Cm))
    return float(vals[0]) if single else vals


def log_ut(fs: FlowSolution, y: Array) -> Array:
    """log u_t(y) in the overflow-safe form |y|^2/2 - |exp(-tM)y|^2/2 - t Tr M."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    x = y @ fs.exp_neg_tm.T
    return (0.5 * np.einsum("mi,mi->m", y, y)
            - 0.5 * np.einsum("mi,mi->m", x, x)
            - fs.t * np.trace(fs.matrix.m))


def ut_solution(fs: FlowSolution, y: Array) -> Array | float:
    """Solution value u_t(y), by substituting x = exp(-tM) y into the flow law."""
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    vals = np.exp(log_ut(fs, y[None, :] if single else y))
    return float(vals[0]) if single else vals


def grad_ut(fs: FlowSolution, y: Array) -> Array:
    """Closed-form gradient: u_t(y) * (I - exp(-tM)^T exp(-tM)) y."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    u = np.exp(log_ut(fs, y))
    lin = y - (y @ fs.exp_neg_tm.T) @ fs.exp_neg_tm
    return u[:, None] * lin


def dt_ut(fs: FlowSolution, y: Array) -> Array:
    """Time derivative d/dt u_t(y) = -div_gamma(M y u_t)(y), closed form."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    M = fs.matrix.m
    u = np.exp(log_ut(fs, y))
    My = y @ M.T
    div_field = np.trace(M) - np.einsum("mi,mi->m", My, y)
    grad = grad_ut(fs, y)
    return -(u * div_field + np.einsum("mi,mi->m", My, grad))


def suggested_p(M: HSMatrix, t: float) -> float:
    """Starting integrability exponent p(t, |M|) > 1 for the W^{1,p} check.

    The excess is floored so the suggestion stays strictly above 1 in
    floating point even for long horizons, where 0.5 / (1 + t|M|e^{t|M|})^2
    underflows.
    """
    g = t * M.hs_norm * np.exp(min(t * M.hs_norm, 700.0))
    return 1.0 + max(0.5 / (1.0 + g) ** 2, 1e-9)


@dataclass(frozen=True)
class LpReport:
    p: float
    finite: bool
    norm_u: float
    norm_grad_u: float
    reason: str = ""


def lp_bound_check(fs: FlowSolution, p: float, space: GaussianSpace) -> LpReport:
    """Quadrature estimates of ||u_t||_p and ||grad u_t||_p.

    The pre-check requires the effective quadratic form of u_t^p against the
    Gaussian weight to stay positive definite: p * lambda_max(I - S^-1) < 1
    with S = exp(tM) exp(tM)^T; otherwise the moment integral diverges and a
    "p too large" report is returned.
    """
    if p <= 1:
        raise ValueError("p must be > 1")
    S_inv = fs.exp_neg_tm.T @ fs.exp_neg_tm
    lam_max = float(np.linalg.eigvalsh(np.eye(fs.dim) - S_inv).max())
    if p * lam_max >= 1.0 - 1e-9:
        return LpReport(p, False, np.inf, np.inf,
                        f"p too large for this (t={fs.t}, |M|={fs.matrix.hs_norm:.3g})")

    def u_pow(pts):
        return np.exp(p * log_ut(fs, pts))

    def grad_pow(pts):
        g = grad_ut(fs, pts)
        return np.linalg.norm(g, axis=1) ** p

    nu = expect(space, u_pow).value ** (1.0 / p)
    ng = expect(space, grad_pow).value ** (1.0 / p)
    return LpReport(p, True, float(nu), float(ng))


def weak_continuity_residual(M: HSMatrix, phis, space: GaussianSpace,
                             t_span: float = 1.0, n_time: int = 32) -> float:
    """Max weak residual of the continuity equation over a test battery.

    Each battery item is (theta, theta_prime, psi, grad_psi) with theta a C^1
    bump vanishing at 0 and t_span.  The residual is

        int_0^T theta'(t) F(t) dt + int_0^T theta(t) G(t) dt,
        F(t) = int psi u_t dgamma,   G(t) = int <grad psi, M x> u_t dgamma,

    evaluated with Gauss-Legendre in time and the space engine in x.
    """
    tq, tw = np.polynomial.legendre.leggauss(n_time)
    tq = 0.5 * t_span * (tq + 1.0)
    tw = 0.5 * t_span * tw
    worst = 0.0
    flows = [flow_solution(M, t) for t in tq]
    for theta, theta_p, psi, grad_psi in phis:
        acc = 0.0
        for t, w, fsol in zip(tq, tw, flows):
            def fm(pts, fsol=fsol):
                return np.asarray(psi(pts)) * np.exp(log_ut(fsol, pts))

            def gm(pts, fsol=fsol):
                Mx = pts @ M.m.T
                return np.einsum("mi,mi->m", np.asarray(grad_psi(pts)), Mx) \
                    * np.exp(log_ut(fsol, pts))

            acc += w * (theta_p(t) * expect(space, fm).value
                        + theta(t) * expect(space, gm).value)
        worst = max(worst, abs(acc))
    return worst
