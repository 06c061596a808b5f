"""Gaussian-weighted Neumann problems and the induced global BV field.

Solves, on a convex domain Omega (interval in 1D, polygonal disk in 2D),

    - div(gamma grad eta) / gamma + lambda eta = f   in Omega,
      d eta / dn = 0                                 on the boundary,

in the standard weak form: find eta with
int_Omega [<grad phi, grad eta> + lambda phi eta] dgamma = int_Omega f phi dgamma
for all test phi.  P1 Galerkin elements; the Gaussian weight
exp(-|x|^2/2) (2 pi)^(-d/2) enters every element integral through per-element
Gauss quadrature, never through lumping.

The solution extends to the global field b = (grad eta) chi_Omega, whose
distributional divergence is (lambda eta - f) chi_Omega; the weak-divergence
check measures |int <grad phi, b> dgamma - int_Omega (f - lambda eta) phi dgamma|
for a battery of smooth global phi, and the comparison principle bounds
lambda eta by the bounds of f.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fields import BVField, Interface, Piece, SmoothField
from .gauss import Array

ScalarFn = Callable[[Array], Array]


def _gauss_weight(pts: Array) -> Array:
    d = pts.shape[1]
    return (2.0 * np.pi) ** (-d / 2.0) * np.exp(
        -0.5 * np.einsum("mi,mi->m", pts, pts))


# ---------------------------------------------------------------------------
# domains
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IntervalDomain:
    """Uniform P1 mesh of [a, b]."""

    a: float
    b: float
    n_elements: int

    def __post_init__(self):
        if self.b <= self.a or self.n_elements < 1:
            raise ValueError("need a < b and at least one element")

    @property
    def dim(self) -> int:
        return 1

    @property
    def nodes(self) -> Array:
        return np.linspace(self.a, self.b, self.n_elements + 1)

    def refined(self) -> "IntervalDomain":
        return IntervalDomain(self.a, self.b, 2 * self.n_elements)

    def contains(self, pts: Array) -> Array:
        x = pts[:, 0]
        return (x > self.a) & (x < self.b)


# Dunavant degree-5 rule on the reference triangle (barycentric, weights sum 1)
_TRI_W = np.array([0.225]
                  + [0.132394152788506] * 3
                  + [0.125939180544827] * 3)
_a1, _b1 = 0.059715871789770, 0.470142064105115
_a2, _b2 = 0.797426985353087, 0.101286507323456
_TRI_BARY = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_a1, _b1, _b1], [_b1, _a1, _b1], [_b1, _b1, _a1],
    [_a2, _b2, _b2], [_b2, _a2, _b2], [_b2, _b2, _a2],
])


@dataclass(frozen=True)
class TriangleMesh:
    """P1 triangulation of a convex polygon (rings-of-nodes disk by default)."""

    nodes: Array              # (n, 2)
    triangles: Array          # (m, 3) int
    boundary_edges: Array     # (k, 2) int, consecutive along the boundary
    radius: float = 1.0
    rings: int = 0

    @property
    def dim(self) -> int:
        return 2

    def refined(self) -> "TriangleMesh":
        return disk_domain(2 * self.rings, self.radius)

    def contains(self, pts: Array) -> Array:
        # convex polygon with vertices on the outer ring: radial test against
        # the inscribed polygon is done edge by edge
        verts = self.nodes[self.boundary_edges[:, 0]]
        nxt = self.nodes[self.boundary_edges[:, 1]]
        inside = np.ones(pts.shape[0], dtype=bool)
        for p, q in zip(verts, nxt):
            edge = q - p
            normal = np.array([edge[1], -edge[0]])  # outward for CCW boundary
            inside &= (pts - p) @ normal < 0.0
        return inside


def disk_domain(rings: int, radius: float = 1.0) -> TriangleMesh:
    """Disk triangulated by concentric rings (6k nodes on ring k).

    Annuli are filled by the two-pointer walk over the inner/outer node
    circles; every triangle is reoriented counterclockwise.
    """
    if rings < 1:
        raise ValueError("need at least one ring")
    nodes = [np.zeros(2)]
    ring_start = [0, 1]
    for k in range(1, rings + 1):
        n_k = 6 * k
        ang = 2.0 * np.pi * np.arange(n_k) / n_k
        r = radius * k / rings
        nodes.append(np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1))
        ring_start.append(ring_start[-1] + n_k)
    nodes = np.concatenate([nodes[0][None, :]] + nodes[1:], axis=0)

    tris = []
    # center fan
    s1 = ring_start[1]
    for j in range(6):
        tris.append((0, s1 + j, s1 + (j + 1) % 6))
    # annuli
    for k in range(2, rings + 1):
        n_in, n_out = 6 * (k - 1), 6 * k
        si, so = ring_start[k - 1], ring_start[k]
        i = j = 0
        while i < n_in or j < n_out:
            adv_in = (i + 1) / n_in if i < n_in else np.inf
            adv_out = (j + 1) / n_out if j < n_out else np.inf
            if adv_out <= adv_in:
                tris.append((so + j % n_out, so + (j + 1) % n_out,
                             si + i % n_in))
                j += 1
            else:
                tris.append((si + i % n_in, so + j % n_out,
                             si + (i + 1) % n_in))
                i += 1
    tris = np.asarray(tris, dtype=int)

    # enforce CCW orientation
    p = nodes[tris]
    area2 = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) \
        - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
    flip = area2 < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]

    so = ring_start[rings]
    n_out = 6 * rings
    edges = np.stack([so + np.arange(n_out),
                      so + (np.arange(n_out) + 1) % n_out], axis=1)
    return TriangleMesh(nodes, tris, edges, radius=radius, rings=rings)


Domain = IntervalDomain | TriangleMesh


# ---------------------------------------------------------------------------
# assembly and solve
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EllipticSolution:
    domain: Domain
    lam: float
    f: ScalarFn
    eta: Array                 # nodal values
    residual_inf: float        # discrete system residual
    energy: float              # eta^T (K + lam M) eta
    f_sq_integral: float       # int_Omega f^2 dgamma

    def grad_elementwise(self) -> Array:
        """(m, d) constant gradient per element."""
        dom = self.domain
        if isinstance(dom, IntervalDomain):
            x = dom.nodes
            return ((self.eta[1:] - self.eta[:-1]) / (x[1:] - x[:-1]))[:, None]
        g, _, _ = _tri_geometry(dom)
        return np.einsum("mad,ma->md", g, self.eta[dom.triangles])

    @property
    def coercive(self) -> bool:
        return self.energy <= self.f_sq_integral / self.lam + 1e-9 \
            * max(1.0, self.f_sq_integral)


def _interval_quadrature(dom: IntervalDomain, order: int = 8
                         ) -> tuple[Array, Array, Array]:
    """Per-element GL nodes (m, q), weights (m, q), and hat-function values."""
    x = dom.nodes
    z, w = np.polynomial.legendre.leggauss(order)
    lo, hi = x[:-1], x[1:]
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    pts = mid[:, None] + half[:, None] * z[None, :]
    wts = half[:, None] * w[None, :]
    lam1 = (hi[:, None] - pts) / (hi - lo)[:, None]   # value of left hat
    return pts, wts, lam1


def _assemble_interval(dom: IntervalDomain, lam: float, f: ScalarFn
                       ) -> tuple[sp.csr_matrix, Array, float]:
    x = dom.nodes
    n = x.size
    pts, wts, lam1 = _interval_quadrature(dom)
    gamma = _gauss_weight(pts.reshape(-1, 1)).reshape(pts.shape)
    fval = np.asarray(f(pts.reshape(-1, 1))).reshape(pts.shape)
    h = x[1:] - x[:-1]
    wg = wts * gamma

    s = wg.sum(axis=1) / h**2                 # int gamma / h^2 per element
    m11 = (wg * lam1 * lam1).sum(axis=1)
    m12 = (wg * lam1 * (1 - lam1)).sum(axis=1)
    m22 = (wg * (1 - lam1) ** 2).sum(axis=1)
    f1 = (wg * fval * lam1).sum(axis=1)
    f2 = (wg * fval * (1 - lam1)).sum(axis=1)

    rows = np.concatenate([np.arange(n - 1), np.arange(n - 1),
                           np.arange(1, n), np.arange(1, n)])
    cols = np.concatenate([np.arange(n - 1), np.arange(1, n),
                           np.arange(n - 1), np.arange(1, n)])
    vals = np.concatenate([s + lam * m11, -s + lam * m12,
                           -s + lam * m12, s + lam * m22])
    A = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    F = np.zeros(n)
    np.add.at(F, np.arange(n - 1), f1)
    np.add.at(F, np.arange(1, n), f2)
    fsq = float((wg * fval * fval).sum())
    return A, F, fsq


def _tri_geometry(mesh: TriangleMesh) -> tuple[Array, Array, Array]:
    """P1 gradients (m, 3, 2), areas (m,), quadrature points (m, 7, 2)."""
    p = mesh.nodes[mesh.triangles]          # (m, 3, 2)
    v1 = p[:, 1] - p[:, 0]
    v2 = p[:, 2] - p[:, 0]
    area2 = v1[:, 0] * v2[:, 1] - v1[:, 1] * v2[:, 0]
    grads = np.empty((p.shape[0], 3, 2))
    for a in range(3):
        q, r = p[:, (a + 1) % 3], p[:, (a + 2) % 3]
        grads[:, a, 0] = (q[:, 1] - r[:, 1]) / area2
        grads[:, a, 1] = (r[:, 0] - q[:, 0]) / area2
    qpts = np.einsum("qa,mad->mqd", _TRI_BARY, p)
    return grads, 0.5 * np.abs(area2), qpts


def _assemble_mesh(mesh: TriangleMesh, lam: float, f: ScalarFn
                   ) -> tuple[sp.csr_matrix, Array, float]:
    grads, area, qpts = _tri_geometry(mesh)
    m = area.size
    gamma = _gauss_weight(qpts.reshape(-1, 2)).reshape(m, 7)
    fval = np.asarray(f(qpts.reshape(-1, 2))).reshape(m, 7)
    wq = _TRI_W[None, :] * area[:, None]
    gamma_int = (wq * gamma).sum(axis=1)

    K_loc = np.einsum("mad,mbd,m->mab", grads, grads, gamma_int)
    M_loc = np.einsum("qa,qb,mq->mab", _TRI_BARY, _TRI_BARY, wq * gamma)
    F_loc = np.einsum("qa,mq->ma", _TRI_BARY, wq * gamma * fval)

    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    A = sp.coo_matrix(((K_loc + lam * M_loc).ravel(), (rows, cols)),
                      shape=(mesh.nodes.shape[0],) * 2).tocsr()
    F = np.zeros(mesh.nodes.shape[0])
    np.add.at(F, tri.ravel(), F_loc.ravel())
    fsq = float((wq * gamma * fval * fval).sum())
    return A, F, fsq


def solve_neumann(dom: Domain, lam: float, f: ScalarFn) -> EllipticSolution:
    """Galerkin solution of the weighted Neumann problem (SPD system).

    Raises if the assembled system is singular, which cannot happen for
    lam > 0 on a connected mesh.
    """
    if lam <= 0:
        raise ValueError("lambda must be > 0")
    if isinstance(dom, IntervalDomain):
        A, F, fsq = _assemble_interval(dom, lam, f)
    else:
        A, F, fsq = _assemble_mesh(dom, lam, f)
    eta = spla.spsolve(A.tocsc(), F)
    if not np.all(np.isfinite(eta)):
        raise np.linalg.LinAlgError("singular Neumann system")
    res = float(np.abs(A @ eta - F).max())
    energy = float(eta @ (A @ eta))
    return EllipticSolution(dom, float(lam), f, eta, res, energy, fsq)


# ---------------------------------------------------------------------------
# the extended BV field and its checks
# ---------------------------------------------------------------------------

def extended_field(sol: EllipticSolution, dom: Domain | None = None) -> BVField:
    """Global field equal to grad eta inside Omega and 0 outside (1D).

    The interior gradient is recovered as the piecewise-linear interpolant of
    nodal gradient averages, so the inside piece has a genuine Jacobian; the
    interface jumps at the endpoints equal the recovered boundary gradients,
    which the Neumann condition drives to 0 under refinement.
    """
    dom = dom or sol.domain
    if not isinstance(dom, IntervalDomain):
        raise NotImplementedError(
            "the global BV extension is built for interval domains; "
            "2D meshes expose boundary_flux_l1 / weak_div_check instead")
    x = dom.nodes
    ge = sol.grad_elementwise()[:, 0]
    gn = np.empty(x.size)
    gn[1:-1] = 0.5 * (ge[:-1] + ge[1:])
    gn[0], gn[-1] = ge[0], ge[-1]

    def value(pts):
        return np.interp(pts[:, 0], x, gn, left=gn[0], right=gn[-1])[:, None]

    def jac(pts):
        slope = np.zeros(pts.shape[0])
        idx = np.clip(np.searchsorted(x, pts[:, 0]) - 1, 0, x.size - 2)
        slope = (gn[idx + 1] - gn[idx]) / (x[idx + 1] - x[idx])
        return slope[:, None, None]

    inside = SmoothField(1, value, jac, name="grad-eta")
    zero = SmoothField(1, lambda pts: np.zeros_like(pts),
                       lambda pts: np.zeros((pts.shape[0], 1, 1)), name="zero")

    itf_a = Interface(np.array([1.0]), dom.a,
                      lambda pts: np.full((pts.shape[0], 1), gn[0]))
    itf_b = Interface(np.array([1.0]), dom.b,
                      lambda pts: np.full((pts.shape[0], 1), -gn[-1]))
    pieces = (
        Piece((-1, -1), zero),            # x < a
        Piece((1, -1), inside),           # a < x < b
        Piece((1, 1), zero),              # x > b
    )
    return BVField(1, pieces, (itf_a, itf_b), name="neumann-extension")


@dataclass(frozen=True)
class WeakDivReport:
    residuals: tuple[float, ...]
    max_residual: float


def weak_div_check(sol: EllipticSolution,
                   battery: Sequence[tuple[ScalarFn, Callable[[Array], Array]]]
                   ) -> WeakDivReport:
    """Residuals of int <grad phi, grad eta> dgamma = int_Omega (f - lam eta) phi dgamma.

    Both sides are evaluated by the same per-element quadrature; phi is a
    smooth global function given with its gradient.
    """
    dom = sol.domain
    res = []
    if isinstance(dom, IntervalDomain):
        pts, wts, lam1 = _interval_quadrature(dom)
        gamma = _gauss_weight(pts.reshape(-1, 1)).reshape(pts.shape)
        wg = wts * gamma
        ge = sol.grad_elementwise()[:, 0]
        eta_q = lam1 * sol.eta[:-1, None] + (1 - lam1) * sol.eta[1:, None]
        fq = np.asarray(sol.f(pts.reshape(-1, 1))).reshape(pts.shape)
        for phi, grad_phi in battery:
            pv = np.asarray(phi(pts.reshape(-1, 1))).reshape(pts.shape)
            gv = np.asarray(grad_phi(pts.reshape(-1, 1)))[:, 0].reshape(pts.shape)
            lhs = float((wg * gv * ge[:, None]).sum())
            rhs = float((wg * (fq - sol.lam * eta_q) * pv).sum())
            res.append(abs(lhs - rhs))
    else:
        grads, area, qpts = _tri_geometry(dom)
        m = area.size
        flat = qpts.reshape(-1, 2)
        gamma = _gauss_weight(flat).reshape(m, 7)
        wq = _TRI_W[None, :] * area[:, None] * gamma
        ge = sol.grad_elementwise()
        eta_q = np.einsum("qa,ma->mq", _TRI_BARY, sol.eta[dom.triangles])
        fq = np.asarray(sol.f(flat)).reshape(m, 7)
        for phi, grad_phi in battery:
            pv = np.asarray(phi(flat)).reshape(m, 7)
            gv = np.asarray(grad_phi(flat)).reshape(m, 7, 2)
            lhs = float((wq * np.einsum("mqd,md->mq", gv, ge)).sum())
            rhs = float((wq * (fq - sol.lam * eta_q) * pv).sum())
            res.append(abs(lhs - rhs))
    return WeakDivReport(tuple(res), max(res))


def boundary_flux_l1(sol: EllipticSolution, order: int = 4) -> float:
    """int_boundary |<grad eta, n>| with the Gaussian surface weight.

    In 1D this is the weighted sum of the two endpoint fluxes; on a mesh the
    normal trace comes from the boundary element of each edge.  The Neumann
    condition makes this vanish under refinement.
    """
    dom = sol.domain
    if isinstance(dom, IntervalDomain):
        ge = sol.grad_elementwise()[:, 0]
        wa = _gauss_weight(np.array([[dom.a]]))[0]
        wb = _gauss_weight(np.array([[dom.b]]))[0]
        return float(abs(ge[0]) * wa + abs(ge[-1]) * wb)
    ge = sol.grad_elementwise()
    edge_tri = _boundary_edge_elements(dom)
    z, w = np.polynomial.legendre.leggauss(order)
    total = 0.0
    for (i, j), t in zip(dom.boundary_edges, edge_tri):
        p, q = dom.nodes[i], dom.nodes[j]
        tang = q - p
        length = float(np.linalg.norm(tang))
        normal = np.array([tang[1], -tang[0]]) / length
        mid = 0.5 * (p + q)[None, :] + 0.5 * z[:, None] * tang[None, :]
        gamma = _gauss_weight(mid)
        flux = abs(float(ge[t] @ normal))
        total += flux * 0.5 * length * float(w @ gamma)
    return total


def _boundary_edge_elements(mesh: TriangleMesh) -> Array:
    lookup = {}
    for t, tri in enumerate(mesh.triangles):
        for a in range(3):
            e = (int(tri[a]), int(tri[(a + 1) % 3]))
            lookup[frozenset(e)] = t
    return np.array([lookup[frozenset((int(i), int(j)))]
                     for i, j in mesh.boundary_edges])


@dataclass(frozen=True)
class ComparisonReport:
    lam_eta_max: float
    f_max: float
    lam_eta_min: float
    f_min: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return (self.lam_eta_max <= self.f_max + self.tolerance
                and self.lam_eta_min >= self.f_min - self.tolerance)


def comparison_check(sol: EllipticSolution, tolerance: float | None = None
                     ) -> ComparisonReport:
    """lambda * range(eta) against range(f) over Omega, with mesh tolerance."""
    dom = sol.domain
    if isinstance(dom, IntervalDomain):
        pts, _, _ = _interval_quadrature(dom)
        fv = np.asarray(sol.f(pts.reshape(-1, 1)))
        h = (dom.b - dom.a) / dom.n_elements
    else:
        _, _, qpts = _tri_geometry(dom)
        fv = np.asarray(sol.f(qpts.reshape(-1, 2)))
        h = dom.radius / dom.rings
    if tolerance is None:
        tolerance = max(1e-9, float(np.abs(fv).max()) * h * h)
    return ComparisonReport(float(sol.lam * sol.eta.max()), float(fv.max()),
                            float(sol.lam * sol.eta.min()), float(fv.min()),
                            float(tolerance))


def l2_gap_to_refined(coarse: EllipticSolution, fine: EllipticSolution) -> float:
    """L^2(Omega, gamma) distance between nested 1D solutions."""
    dom_f = fine.domain
    assert isinstance(dom_f, IntervalDomain)
    pts, wts, _ = _interval_quadrature(dom_f)
    flat = pts.reshape(-1, 1)
    gamma = _gauss_weight(flat).reshape(pts.shape)
    cd = coarse.domain
    vc = np.interp(flat[:, 0], cd.nodes, coarse.eta).reshape(pts.shape)
    vf = np.interp(flat[:, 0], dom_f.nodes, fine.eta).reshape(pts.shape)
    return float(np.sqrt((wts * gamma * (vc - vf) ** 2).sum()))


@dataclass(frozen=True)
class RefinementRow:
    level: int
    elements: int
    weak_residual: float
    boundary_flux: float
    gap_to_next: float


def refinement_study(dom: Domain, lam: float, f: ScalarFn, levels: int,
                     battery) -> list[RefinementRow]:
    """Solve on ``levels`` nested meshes; report residual decay per level."""
    rows = []
    current = dom
    sols = []
    for _ in range(levels):
        sols.append(solve_neumann(current, lam, f))
        current = current.refined()
    for lv, sol in enumerate(sols):
        gap = (l2_gap_to_refined(sol, sols[lv + 1])
               if lv + 1 < len(sols) and isinstance(dom, IntervalDomain)
               else float("nan"))
        n_el = (sol.domain.n_elements if isinstance(sol.domain, IntervalDomain)
                else sol.domain.triangles.shape[0])
        rows.append(RefinementRow(lv, n_el,
                                  weak_div_check(sol, battery).max_residual,
                                  boundary_flux_l1(sol), gap))
    return rows


def smooth_phi_battery_1d():
    return [
        (lambda pts: np.sin(pts[:, 0]), lambda pts: np.cos(pts)),
        (lambda pts: pts[:, 0] ** 2, lambda pts: 2.0 * pts),
        (lambda pts: np.exp(-pts[:, 0] ** 2),
         lambda pts: -2.0 * pts * np.exp(-pts[:, 0] ** 2)),
        (lambda pts: np.cos(2.0 * pts[:, 0]),
         lambda pts: -2.0 * np.sin(2.0 * pts)),
        (lambda pts: pts[:, 0], lambda pts: np.ones_like(pts)),
    ]


def smooth_phi_battery_2d():
    def g1(pts):
        out = np.zeros_like(pts)
        out[:, 0] = np.cos(pts[:, 0]) * np.cos(pts[:, 1])
        out[:, 1] = -np.sin(pts[:, 0]) * np.sin(pts[:, 1])
        return out

    def g2(pts):
        return 2.0 * pts

    def g3(pts):
        e = np.exp(-np.einsum("mi,mi->m", pts, pts))
        return -2.0 * pts * e[:, None]

    return [
        (lambda pts: np.sin(pts[:, 0]) * np.cos(pts[:, 1]), g1),
        (lambda pts: np.einsum("mi,mi->m", pts, pts), g2),
        (lambda pts: np.exp(-np.einsum("mi,mi->m", pts, pts)), g3),
        (lambda pts: pts[:, 0] * pts[:, 1],
         lambda pts: np.stack([pts[:, 1], pts[:, 0]], axis=1)),
    ]
