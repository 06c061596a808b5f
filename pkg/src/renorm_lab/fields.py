"""Driving vector fields and their derivative measures.

Two field classes are modelled.  ``SmoothField`` wraps closed-form value and
Jacobian callables.  ``BVField`` is piecewise smooth across hyperplane
interfaces ``{<nu, x> = offset}``: its derivative measure splits into an
absolutely continuous part (the piecewise Jacobian, taken as a density with
respect to gamma) and jump parts ``[b] (x) nu`` carried by the interfaces
with Gaussian surface weight.

The Gaussian divergence of a field is ``div b(x) - <b(x), x>``; a constant
field therefore has divergence ``-<h, x>``, not zero.

Surface integrals over a hyperplane ``{<nu, x> = c}`` reduce to the 1D
Gaussian density at the offset times an (N-1)-dimensional standard Gaussian
integral in tangential coordinates; for a half-space this reproduces the
Gaussian perimeter ``phi(c)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .gauss import Array, Estimate, GaussianSpace, expect, tensor_rule

VectorFn = Callable[[Array], Array]      # (m, dim) -> (m, dim)
MatrixFn = Callable[[Array], Array]      # (m, dim) -> (m, dim, dim)
ScalarFn = Callable[[Array], Array]      # (m, dim) -> (m,)


class PolarUndefinedError(ValueError):
    """Polar decomposition requested where the derivative measure vanishes."""


class InterfaceHitWarning(UserWarning):
    """A BV field was evaluated exactly on one of its interfaces."""


# ---------------------------------------------------------------------------
# smooth fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SmoothField:
    """Field with closed-form Jacobian.

    ``value_fn`` maps (m, dim) points to (m, dim) vectors, ``jac_fn`` to
    (m, dim, dim) Jacobians; ``div_fn`` optionally overrides the Euclidean
    divergence (defaults to the Jacobian trace).
    """

    dim: int
    value_fn: VectorFn
    jac_fn: MatrixFn
    div_fn: ScalarFn | None = None
    name: str = ""

    def __call__(self, pts: Array) -> Array:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return np.asarray(self.value_fn(pts), dtype=float)

    def jacobian(self, pts: Array) -> Array:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return np.asarray(self.jac_fn(pts), dtype=float)

    def euclid_div(self, pts: Array) -> Array:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.div_fn is not None:
            return np.asarray(self.div_fn(pts), dtype=float)
        jac = self.jacobian(pts)
        return np.trace(jac, axis1=1, axis2=2)

    def gauss_div(self, pts: Array) -> Array:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        vals = self(pts)
        return self.euclid_div(pts) - np.einsum("ij,ij->i", vals, pts)


def constant_field(h: Sequence[float], name: str = "") -> SmoothField:
    h = np.asarray(h, dtype=float)
    d = h.size

    def value(pts):
        return np.broadcast_to(h, (pts.shape[0], d)).copy()

    def jac(pts):
        return np.zeros((pts.shape[0], d, d))

    return SmoothField(d, value, jac, name=name or "constant")


def linear_field(M: Sequence[Sequence[float]], name: str = "") -> SmoothField:
    M = np.asarray(M, dtype=float)
    d = M.shape[0]

    def value(pts):
        return pts @ M.T

    def jac(pts):
        return np.broadcast_to(M, (pts.shape[0], d, d)).copy()

    return SmoothField(d, value, jac, name=name or "linear")


def zero_field(dim: int) -> SmoothField:
    return constant_field(np.zeros(dim), name="zero")


# ---------------------------------------------------------------------------
# hyperplane interfaces and piecewise fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Interface:
    """Hyperplane ``{<nu, x> = offset}`` carrying a jump vector field.

    ``jump_fn`` evaluates ``[b] = b_plus - b_minus`` at points of the
    hyperplane (plus side means ``<nu, x> > offset``).
    """

    normal: Array
    offset: float
    jump_fn: VectorFn

    def __post_init__(self):
        nu = np.asarray(self.normal, dtype=float)
        n = np.linalg.norm(nu)
        if not np.isclose(n, 1.0, atol=1e-12):
            raise ValueError("interface normal must be a unit vector")
        nu = nu / n
        nu.setflags(write=False)
        object.__setattr__(self, "normal", nu)

    @property
    def dim(self) -> int:
        return self.normal.size

    def signed_dist(self, pts: Array) -> Array:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return pts @ self.normal - self.offset

    def jump(self, pts: Array) -> Array:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return np.asarray(self.jump_fn(pts), dtype=float)

    def tangent_basis(self) -> Array:
        """Orthonormal (dim, dim-1) basis of the tangent space."""
        d = self.dim
        # Householder reflection mapping e_1 to the normal: remaining columns
        # span the tangent space deterministically.
        e1 = np.zeros(d)
        e1[0] = 1.0
        v = self.normal - e1
        if np.linalg.norm(v) < 1e-14:
            H = np.eye(d)
        else:
            v = v / np.linalg.norm(v)
            H = np.eye(d) - 2.0 * np.outer(v, v)
        return H[:, 1:]


def surface_nodes(space: GaussianSpace, interface: Interface,
                  method: str | None = None, stream: int = 17
                  ) -> tuple[Array, Array, float]:
    """Quadrature nodes on the hyperplane with the Gaussian surface weight.

    Returns (points (m, dim), weights (m,), total_weight) where the surface
    integral of g is ``total_weight * sum(weights * g(points))`` with
    ``sum(weights) = 1`` and ``total_weight = phi(offset)`` the 1D standard
    normal density at the offset.
    """
    d = space.dim
    phi_c = float(np.exp(-0.5 * interface.offset**2) / np.sqrt(2.0 * np.pi))
    base = interface.offset * interface.normal
    if d == 1:
        return base[None, :], np.ones(1), phi_c
    T = interface.tangent_basis()
    method = method or space.default_method
    if method == "quadrature":
        z, w = tensor_rule(d - 1, space.quad_order)
    else:
        rng = space.rng(stream)
        n = space.mc_budget
        z = rng.standard_normal(size=(n, d - 1))
        w = np.full(n, 1.0 / n)
    pts = base + z @ T.T
    return pts, w, phi_c


def surface_expect(space: GaussianSpace, interface: Interface, g: ScalarFn,
                   method: str | None = None) -> Estimate:
    """Integral of g over the hyperplane against the Gaussian surface measure."""
    pts, w, phi_c = surface_nodes(space, interface, method)
    vals = np.asarray(g(pts), dtype=float)
    value = phi_c * float(w @ vals)
    method = method or space.default_method
    if method == "monte-carlo" and len(vals) > 1:
        se = phi_c * float(np.std(vals, ddof=1) / np.sqrt(len(vals)))
    else:
        se = 0.0
    return Estimate(value, se, method)


@dataclass(frozen=True)
class Piece:
    """Region of a piecewise field: sign pattern over the interfaces.

    ``signs[k]`` in {-1, 0, +1}; 0 means the piece ignores interface k.
    """

    signs: tuple[int, ...]
    field: SmoothField


@dataclass(frozen=True)
class BVField:
    """Piecewise smooth field across hyperplane interfaces."""

    dim: int
    pieces: tuple[Piece, ...]
    interfaces: tuple[Interface, ...]
    name: str = ""

    def piece_index(self, pts: Array) -> Array:
        """Index of the active piece per point.

        Points lying exactly on an interface are attributed to the
        ``<nu, x> > offset`` side and flagged with InterfaceHitWarning.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        m = pts.shape[0]
        signs = np.empty((m, len(self.interfaces)), dtype=int)
        hit = np.zeros(m, dtype=bool)
        for k, itf in enumerate(self.interfaces):
            sd = itf.signed_dist(pts)
            hit |= sd == 0.0
            signs[:, k] = np.where(sd >= 0.0, 1, -1)
        if hit.any():
            warnings.warn("evaluation on an interface; using the positive side",
                          InterfaceHitWarning, stacklevel=2)
        idx = np.full(m, -1, dtype=int)
        for j, piece in enumerate(self.pieces):
            want = np.asarray(piece.signs, dtype=int)
            mask = np.ones(m, dtype=bool)
            for k, s in enumerate(want):
                if s != 0:
                    mask &= signs[:, k] == s
            idx[np.logical_and(mask, idx < 0)] = j
        if (idx < 0).any():
            raise ValueError("pieces do not cover some evaluation points")
        return idx

    def _per_piece(self, pts: Array, fn: Callable[[SmoothField, Array], Array],
                   out_shape: tuple) -> Array:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        idx = self.piece_index(pts)
        out = np.zeros((pts.shape[0],) + out_shape)
        for j, piece in enumerate(self.pieces):
            mask = idx == j
            if mask.any():
                out[mask] = fn(piece.field, pts[mask])
        return out

    def __call__(self, pts: Array) -> Array:
        return self._per_piece(pts, lambda f, p: f(p), (self.dim,))

    def jacobian(self, pts: Array) -> Array:
        return self._per_piece(pts, lambda f, p: f.jacobian(p), (self.dim, self.dim))

    def euclid_div(self, pts: Array) -> Array:
        return self._per_piece(pts, lambda f, p: f.euclid_div(p), ())

    def gauss_div(self, pts: Array) -> Array:
        """Pointwise (a.e.) Gaussian divergence; ignores interface atoms.

        This is the honest divergence function only when every jump is
        tangential (``<[b], nu> = 0``); ``normal_jump_size`` measures the
        violation.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        vals = self(pts)
        return self.euclid_div(pts) - np.einsum("ij,ij->i", vals, pts)

    def normal_jump_size(self, space: GaussianSpace) -> float:
        """max over interfaces of the sampled sup of |<[b], nu>|."""
        worst = 0.0
        for itf in self.interfaces:
            pts, _, _ = surface_nodes(space, itf)
            jn = self.jump_on(itf, pts) @ itf.normal
            worst = max(worst, float(np.abs(jn).max()))
        return worst

    def jump_on(self, interface: Interface, pts: Array) -> Array:
        return interface.jump(pts)


Field = Union[SmoothField, BVField]


def sign_field(h: Sequence[float], normal: Sequence[float], offset: float = 0.0,
               name: str = "") -> BVField:
    """``b(x) = sign(<nu, x> - offset) * h``; jump 2h across the interface."""
    h = np.asarray(h, dtype=float)
    d = h.size
    itf = Interface(np.asarray(normal, dtype=float), offset,
                    lambda pts: np.broadcast_to(2.0 * h, (pts.shape[0], d)).copy())
    plus = Piece((1,), constant_field(h))
    minus = Piece((-1,), constant_field(-h))
    return BVField(d, (plus, minus), (itf,), name=name or "sign-field")


def piecewise_field(minus: SmoothField, plus: SmoothField,
                    normal: Sequence[float], offset: float = 0.0,
                    name: str = "") -> BVField:
    """Two smooth pieces glued across one hyperplane; jump inferred from them."""
    nu = np.asarray(normal, dtype=float)
    d = minus.dim

    def jump(pts):
        return plus(pts) - minus(pts)

    itf = Interface(nu, offset, jump)
    return BVField(d, (Piece((1,), plus), Piece((-1,), minus)), (itf,),
                   name=name or "piecewise")


# ---------------------------------------------------------------------------
# operations of the public surface
# ---------------------------------------------------------------------------

def eval_field(b: Field, x: Array) -> Array:
    """Value of the field at x; single point (dim,) or batch (m, dim)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return b(x[None, :])[0]
    return b(x)


def gauss_divergence(b: Field, x: Array) -> Array | float:
    """Gaussian divergence ``div b(x) - <b(x), x>`` at smooth points."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return float(b.gauss_div(x[None, :])[0])
    return b.gauss_div(x)


@dataclass(frozen=True)
class JumpPart:
    """Singular contribution ``[b] (x) nu`` on one interface."""

    interface: Interface

    def matrix(self, pts: Array) -> Array:
        """(m, dim, dim) values of ``[b](x) (x) nu`` on the hyperplane."""
        j = self.interface.jump(pts)
        return np.einsum("mi,j->mij", j, self.interface.normal)

    def strength(self, pts: Array) -> Array:
        """HS norm of the jump matrix, equals |[b]| for a unit normal."""
        return np.linalg.norm(self.interface.jump(pts), axis=1)


@dataclass(frozen=True)
class DerivativeMeasure:
    """Decomposition of Db into density and interface parts.

    ``ac_density`` is the (m, dim, dim) Jacobian density of the absolutely
    continuous part with respect to gamma; jump parts carry ``[b] (x) nu``
    on their hyperplanes.  ``tv_ac``/``tv_jump`` are the total variations of
    the two parts.
    """

    dim: int
    ac_density: MatrixFn
    jump_parts: tuple[JumpPart, ...]
    tv_ac: float
    tv_jump: float

    @property
    def total(self) -> float:
        return self.tv_ac + self.tv_jump


def derivative_measure(b: Field, space: GaussianSpace) -> DerivativeMeasure:
    """Derivative measure of a smooth or piecewise-smooth field.

    The absolutely continuous total variation integrates the HS norm of the
    (piecewise) Jacobian against gamma; each jump part contributes the
    surface integral of |[b]| with the Gaussian surface weight.
    """
    if isinstance(b, SmoothField):
        jac = b.jacobian
        parts: tuple[JumpPart, ...] = ()
    else:
        jac = b.jacobian
        parts = tuple(JumpPart(itf) for itf in b.interfaces)

    def hs_norm(pts):
        J = jac(pts)
        return np.sqrt(np.einsum("mij,mij->m", J, J))

    tv_ac = expect(space, hs_norm).value
    tv_jump = 0.0
    for part in parts:
        tv_jump += surface_expect(space, part.interface,
                                  lambda pts, p=part: p.strength(pts)).value
    if not (np.isfinite(tv_ac) and np.isfinite(tv_jump)):
        raise ValueError("non-finite total variation")
    return DerivativeMeasure(space.dim, jac, parts, float(tv_ac), float(tv_jump))


def polar_part(dm: DerivativeMeasure, x: Array, where: str | int = "ac") -> Array:
    """Unit-HS-norm polar matrix of the requested part of Db at x.

    ``where`` is "ac" for the absolutely continuous part or an interface
    index; raises PolarUndefinedError where the part vanishes.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = x[None, :] if single else x
    if where == "ac":
        M = dm.ac_density(pts)
        norms = np.sqrt(np.einsum("mij,mij->m", M, M))
    else:
        part = dm.jump_parts[int(where)]
        M = part.matrix(pts)
        norms = part.strength(pts)
    if np.any(norms < 1e-14):
        raise PolarUndefinedError("polar undefined: derivative part vanishes here")
    out = M / norms[:, None, None]
    return out[0] if single else out


def total_variation(dm: DerivativeMeasure) -> float:
    return dm.total


# ---------------------------------------------------------------------------
# renormalization nonlinearities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RenormFunction:
    """C^1 nonlinearity with bounded beta' and bounded beta(z) - z beta'(z)."""

    beta: Callable[[Array], Array]
    beta_prime: Callable[[Array], Array]
    sup_beta_prime: float
    sup_affine_gap: float
    name: str = ""

    def check_bounds(self, lo: float = -1e6, hi: float = 1e6, n: int = 200_001
                     ) -> bool:
        z = np.linspace(lo, hi, n)
        bp = np.asarray(self.beta_prime(z))
        gap = np.asarray(self.beta(z)) - z * bp
        return bool(np.abs(bp).max() <= self.sup_beta_prime + 1e-12
                    and np.abs(gap).max() <= self.sup_affine_gap + 1e-12)


ARCTAN_RENORM = RenormFunction(
    beta=np.arctan,
    beta_prime=lambda z: 1.0 / (1.0 + z * z),
    sup_beta_prime=1.0,
    sup_affine_gap=np.pi / 2.0,
    name="arctan",
)

# beta(z) = z / sqrt(1 + z^2); beta - z beta' = z^3 (1+z^2)^(-3/2), sup 1.
SIGMOID_RENORM = RenormFunction(
    beta=lambda z: z / np.sqrt(1.0 + z * z),
    beta_prime=lambda z: (1.0 + z * z) ** -1.5,
    sup_beta_prime=1.0,
    sup_affine_gap=1.0,
    name="z/sqrt(1+z^2)",
)
