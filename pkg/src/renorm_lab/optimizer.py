"""Kernel optimization: flow-averaged mollifiers and the 2/T bound.

The objective for a kernel rho and matrix M is

    J(rho, M) = int | div_gamma(M y rho(y)) | dgamma(y)
              = int | (Tr M - <My, y>) rho(y) + <My, grad rho(y)> | dgamma(y)

(Gaussian mode), or the Lebesgue analogue with ``Tr M rho + <My, grad rho>``.
Averaging the exponential-flow density over a horizon T,

    rho_T = (1/T) int_0^T u_t dt,

gives J(rho_T, M) = (1/T) ||u_T - u_0||_1 <= 2/T, since the time integral of
d/dt u_t telescopes.  This module realizes rho_T with composite
Gauss-Legendre time panels (refined near t = 0 where the density moves
fastest) and verifies the bound on a horizon grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .expflow import (FlowSolution, HSMatrix, dt_ut, flow_solution, grad_ut,
                      log_ut, lp_bound_check, suggested_p)
from .gauss import Array, Estimate, GaussianSpace, expect
from .mollifier import Mollifier, require_valid_kernel

# Panel edges for the composite time rule; clipped to (0, T).  The short
# first panels resolve the initial layer of d/dt u_t for gamma-typical tails.
_PANEL_EDGES = (0.0, 1.0, 2.0, 5.0)


def _time_rule(T: float, nodes: int) -> tuple[Array, Array]:
    edges = [e for e in _PANEL_EDGES if e < T] + [T]
    qs, ws = [], []
    z, w = np.polynomial.legendre.leggauss(nodes)
    for a, b in zip(edges[:-1], edges[1:]):
        qs.append(0.5 * (b - a) * (z + 1.0) + a)
        ws.append(0.5 * (b - a) * w)
    return np.concatenate(qs), np.concatenate(ws)


@dataclass(frozen=True)
class AveragedKernel:
    """Flow-averaged kernel rho_T = (1/T) sum_k w_k u_{t_k}."""

    matrix: HSMatrix
    horizon: float
    time_nodes: Array
    time_weights: Array
    flows: tuple[FlowSolution, ...]

    def rho(self, pts: Array) -> Array:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.zeros(pts.shape[0])
        for w, fsol in zip(self.time_weights, self.flows):
            out += w * np.exp(log_ut(fsol, pts))
        return out / self.horizon

    def grad_rho(self, pts: Array) -> Array:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.zeros_like(pts)
        for w, fsol in zip(self.time_weights, self.flows):
            out += w * grad_ut(fsol, pts)
        return out / self.horizon

    def rho_and_grad(self, pts: Array) -> tuple[Array, Array]:
        """One pass over the time nodes for both rho_T and its gradient."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        val = np.zeros(pts.shape[0])
        grad = np.zeros_like(pts)
        for w, fsol in zip(self.time_weights, self.flows):
            u = np.exp(log_ut(fsol, pts))
            val += w * u
            lin = pts - (pts @ fsol.exp_neg_tm.T) @ fsol.exp_neg_tm
            grad += w * u[:, None] * lin
        return val / self.horizon, grad / self.horizon

    def div_flow(self, pts: Array) -> Array:
        """div_gamma(M y rho_T(y)) via the closed-form time derivatives."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.zeros(pts.shape[0])
        for w, fsol in zip(self.time_weights, self.flows):
            out -= w * dt_ut(fsol, pts)
        return out / self.horizon

    def mass_importance(self, space: GaussianSpace) -> tuple[float, float]:
        """Bounded-weight importance estimate of the gamma-mass of rho_T.

        Direct quadrature of u_t against gamma is ill-conditioned for large
        t |M| (the density concentrates off the gamma-bulk).  Sampling from
        the proposal N(0, S_t + I) with S_t = exp(tM) exp(tM)^T makes the
        weight u_t(z) gamma(z) / q(z) bounded by sqrt(det(S_t + I)/det S_t),
        so the estimator has controlled variance at every horizon.
        """
        n = space.mc_budget
        rng = space.rng(31)
        total = 0.0
        total_sq = 0.0
        for w, fsol in zip(self.time_weights, self.flows):
            S = fsol.exp_tm @ fsol.exp_tm.T
            Q = S + np.eye(fsol.dim)
            L = np.linalg.cholesky(Q)
            z = rng.standard_normal(size=(n, fsol.dim)) @ L.T
            # log [u_t(z) gamma(z) / q(z)]; the +-|z|^2/2 terms cancel
            # symbolically and must not be formed (they reach 1e17 at long
            # horizons and would absorb the O(1) remainder in rounding)
            Qi = np.linalg.inv(Q)
            x = z @ fsol.exp_neg_tm.T
            log_w = (-0.5 * np.einsum("mi,mi->m", x, x)
                     - fsol.t * np.trace(fsol.matrix.m)
                     + 0.5 * np.einsum("mi,ij,mj->m", z, Qi, z)
                     + 0.5 * np.linalg.slogdet(Q)[1])
            vals = np.exp(log_w)
            total += w * float(vals.mean())
            total_sq += (w / self.horizon) ** 2 * float(vals.var(ddof=1)) / n
        return total / self.horizon, float(np.sqrt(total_sq))

    def as_mollifier(self, space: GaussianSpace) -> Mollifier:
        """Wrap as a gaussian-mode Mollifier with empirical sup norms."""
        sample = space.rng(29).standard_normal((10_000, self.matrix.dim))
        rv, gv = self.rho_and_grad(sample)
        return Mollifier(
            dim=self.matrix.dim,
            rho=self.rho,
            grad_rho=self.grad_rho,
            mode="gaussian",
            mass=1.0,
            sup_rho=float(np.abs(rv).max()),
            sup_grad_rho=float(np.linalg.norm(gv, axis=1).max()),
            sup_is_empirical=True,
            name=f"flow(T={self.horizon:g})",
            mass_fn=lambda sp: self.mass_importance(sp),
            rho_grad_fn=self.rho_and_grad,
        )


def averaged_kernel(M: HSMatrix, T: float, nodes: int,
                    space: GaussianSpace) -> AveragedKernel:
    """Assemble rho_T at composite Gauss-Legendre time nodes.

    Each node must pass the W^{1,p} integrability pre-check at the exponent
    suggested for the horizon; a failing node aborts with the (t, p) pair.
    """
    if T <= 0:
        raise ValueError("T must be > 0")
    if nodes < 4:
        raise ValueError("need at least 4 nodes per panel")
    tq, tw = _time_rule(T, nodes)
    flows = tuple(flow_solution(M, t) for t in tq)
    for t, fsol in zip(tq, flows):
        # Exact admissibility threshold: p < 1 / lambda_max(I - S_t^-1) with
        # S_t^-1 the Gram matrix of exp(-tM), so the admissible excess is
        # smin^2 / (1 - smin^2) with smin the smallest singular value of
        # exp(-tM), strictly positive until genuine underflow.  When the
        # excess drops below float resolution the spectral argument stands
        # on its own and the quadrature norm check is skipped.
        smin = float(np.linalg.svd(fsol.exp_neg_tm, compute_uv=False).min())
        if smin == 0.0 or not np.isfinite(smin):
            raise ValueError(f"integrability pre-check failed at (t={t}): "
                             "flow covariance underflows")
        excess = smin**2 / max(1.0 - smin**2, 1e-300)
        p = min(suggested_p(M, T), 1.0 + 0.5 * excess)
        if p - 1.0 > 1e-6:
            rep = lp_bound_check(fsol, p, space.with_(quad_order=8))
            if not rep.finite:
                raise ValueError(
                    f"integrability pre-check failed at (t={t}, p={p})")
    return AveragedKernel(M, float(T), tq, tw, flows)


def objective(m: Mollifier | AveragedKernel, M: HSMatrix,
              space: GaussianSpace, validate: bool = True,
              method: str | None = None) -> Estimate:
    """J(rho, M), the L^1(gamma) size of div_gamma(M y rho(y)).

    Flow-averaged kernels use their closed-form time-derivative route, which
    is algebraically identical to (Tr M - <My,y>) rho + <My, grad rho> but
    cheaper and better conditioned.
    """
    if isinstance(m, AveragedKernel):
        if not np.allclose(m.matrix.m, M.m):
            # rho_T built for one matrix may still be tested against another
            return _objective_direct(m.rho, m.grad_rho, M, space, method)
        return expect(space, lambda pts: np.abs(m.div_flow(pts)),
                      method=method)
    if m.mode == "lebesgue":
        return _objective_lebesgue(m, M)
    if validate:
        require_valid_kernel(m, space)
    return _objective_direct(m.rho, m.grad_rho, M, space, method)


def _objective_direct(rho, grad_rho, M: HSMatrix, space: GaussianSpace,
                      method: str | None = None) -> Estimate:
    Mm = M.m

    def integrand(pts):
        My = pts @ Mm.T
        div_lin = np.trace(Mm) - np.einsum("mi,mi->m", My, pts)
        return np.abs(div_lin * np.asarray(rho(pts))
                      + np.einsum("mi,mi->m", My, np.asarray(grad_rho(pts))))

    return expect(space, integrand, method=method)


def _objective_lebesgue(m: Mollifier, M: HSMatrix, order: int = 96) -> Estimate:
    from .mollifier import _legendre_grid
    pts, wts = _legendre_grid(m.dim, m.support_radius, order)
    My = pts @ M.m.T
    vals = np.abs(np.trace(M.m) * np.asarray(m.rho(pts))
                  + np.einsum("mi,mi->m", My, np.asarray(m.grad_rho(pts))))
    return Estimate(float(wts @ vals), 0.0, "quadrature")


@dataclass(frozen=True)
class BoundRow:
    horizon: float
    objective: float
    std_error: float
    bound: float

    @property
    def passed(self) -> bool:
        return self.objective <= self.bound + 4.0 * self.std_error


def verify_bound(M: HSMatrix, T_grid: Sequence[float], space: GaussianSpace,
                 nodes: int = 16, method: str | None = None) -> list[BoundRow]:
    """J(rho_T, M) against 2/T for each horizon, with common random numbers.

    The matrix is HS-normalized first (J is positively homogeneous in M, so
    the bound is scale-free after normalization).  All horizons share the
    same sampling stream, so Monte Carlo comparisons across T are paired.
    """
    if M.hs_norm == 0:
        return [BoundRow(float(T), 0.0, 0.0, 2.0 / T) for T in T_grid]
    Mn = HSMatrix(M.m / M.hs_norm)
    rows = []
    for T in T_grid:
        ak = averaged_kernel(Mn, float(T), nodes, space)
        est = objective(ak, Mn, space, method=method)
        rows.append(BoundRow(float(T), est.value, est.std_error, 2.0 / float(T)))
    return rows


# ---------------------------------------------------------------------------
# Lebesgue-mode construction (plain convolution setting)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LebesgueAveragedKernel:
    """rho_T for the flat measure: transported bump averaged over (0, T).

    Characteristics of ``d/dt u + div(My u) = 0`` are exact exponentials, so
    ``u_t(y) = u_0(exp(-tM) y) exp(-t Tr M)``.
    """

    matrix: HSMatrix
    horizon: float
    base: Mollifier
    time_nodes: Array
    time_weights: Array

    def support_radius(self) -> float:
        grow = max(float(np.linalg.norm(np.asarray(
            flow_solution(self.matrix, t).exp_tm), 2)) for t in self.time_nodes)
        return self.base.support_radius * grow

    def rho(self, pts: Array) -> Array:
        out = np.zeros(pts.shape[0])
        M = self.matrix
        for t, w in zip(self.time_nodes, self.time_weights):
            fsol = flow_solution(M, t)
            out += w * np.asarray(self.base.rho(pts @ fsol.exp_neg_tm.T)) \
                * np.exp(-t * np.trace(M.m))
        return out / self.horizon

    def grad_rho(self, pts: Array) -> Array:
        out = np.zeros_like(pts)
        M = self.matrix
        for t, w in zip(self.time_nodes, self.time_weights):
            fsol = flow_solution(M, t)
            g = np.asarray(self.base.grad_rho(pts @ fsol.exp_neg_tm.T))
            out += w * (g @ fsol.exp_neg_tm) * np.exp(-t * np.trace(M.m))
        return out / self.horizon

    def as_mollifier(self) -> Mollifier:
        R = self.support_radius()
        return Mollifier(
            dim=self.matrix.dim, rho=self.rho, grad_rho=self.grad_rho,
            mode="lebesgue", mass=1.0, sup_rho=np.nan, sup_grad_rho=np.nan,
            support_radius=R, sup_is_empirical=True,
            name=f"lebesgue-flow(T={self.horizon:g})",
        )


def lebesgue_averaged_kernel(M: HSMatrix, T: float, nodes: int,
                             base: Mollifier) -> LebesgueAveragedKernel:
    if base.mode != "lebesgue":
        raise ValueError("base kernel must be lebesgue mode")
    tq, tw = _time_rule(T, nodes)
    return LebesgueAveragedKernel(M, float(T), base, tq, tw)


def lebesgue_objective(ak: LebesgueAveragedKernel, order: int = 96) -> Estimate:
    return _objective_lebesgue(ak.as_mollifier(), ak.matrix, order=order)
