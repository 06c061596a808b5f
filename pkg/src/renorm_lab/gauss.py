"""Standard Gaussian measure on R^N with quadrature and Monte Carlo engines.

Every check in this package reduces to expectations against the standard
Gaussian measure gamma_N on R^N.  Two interchangeable engines are provided:

* tensor Gauss-Hermite quadrature (probabilists' weight), exact for
  polynomials of per-axis degree < 2 * quad_order;
* seeded Monte Carlo with standard errors.

The truncated model fixes the covariance operator to the identity, so the
Cameron-Martin space is R^N with the Euclidean inner product and the i-th
coordinate plays the role of the i-th dual functional.

Reproducibility: sampling uses numpy's counter-based Philox generator,
seeded through ``SeedSequence(seed, spawn_key=(stream,))``.  Identical
(seed, budget) always yields a bit-identical sample stream; Monte Carlo
sums are accumulated in fixed chunk order so estimates are deterministic.

Integrand convention: scalar integrands map an ``(m, dim)`` array of points
to an ``(m,)`` array of values; vector integrands return ``(m, dim)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

# Chunk size for Monte Carlo accumulation.  Fixed: changing it would
# reorder floating-point sums and break bit-reproducibility of estimates.
_MC_CHUNK = 1 << 16


class NonFiniteIntegrandError(RuntimeError):
    """An integrand produced NaN/inf; carries one offending point."""

    def __init__(self, point: Array, value):
        self.point = np.asarray(point)
        self.value = value
        super().__init__(
            f"integrand returned non-finite value {value!r} at point {self.point!r}"
        )


@dataclass(frozen=True)
class GaussianSpace:
    """Dimension-N standard Gaussian measure with evaluation policies.

    Parameters
    ----------
    dim : int
        Ambient dimension N >= 1.
    quad_order : int
        Gauss-Hermite points per axis for the tensor rule (>= 2).
    mc_budget : int
        Monte Carlo sample count (>= 1).
    seed : int
        64-bit seed for the Philox stream.
    """

    dim: int
    quad_order: int = 20
    mc_budget: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.quad_order < 2:
            raise ValueError("quad_order must be >= 2")
        if self.mc_budget < 1:
            raise ValueError("mc_budget must be >= 1")

    @property
    def default_method(self) -> str:
        # Tensor quadrature up to dim 4, Monte Carlo beyond (cost 20^N).
        return "quadrature" if self.dim <= 4 else "monte-carlo"

    def rng(self, stream: int = 0) -> np.random.Generator:
        """Named, reproducible Philox stream (stream 0 is the default)."""
        ss = np.random.SeedSequence(self.seed, spawn_key=(stream,))
        return np.random.Generator(np.random.Philox(ss))

    def with_(self, **kw) -> "GaussianSpace":
        fields = dict(dim=self.dim, quad_order=self.quad_order,
                      mc_budget=self.mc_budget, seed=self.seed)
        fields.update(kw)
        return GaussianSpace(**fields)


@dataclass(frozen=True)
class Estimate:
    """Value of a gamma-expectation together with its statistical error.

    Quadrature estimates carry std_error == 0 by convention.
    """

    value: float
    std_error: float = 0.0
    method: str = "quadrature"

    def __post_init__(self):
        if self.std_error < 0:
            raise ValueError("std_error must be >= 0")

    def combined_std_error(self, other: "Estimate") -> float:
        return float(np.hypot(self.std_error, other.std_error))

    def agrees_with(self, other: "Estimate", k: float = 4.0, atol: float = 1e-9) -> bool:
        """True when |self - other| <= k * combined std error + atol."""
        tol = k * self.combined_std_error(other) + atol
        return abs(self.value - other.value) <= tol


@lru_cache(maxsize=None)
def gauss_hermite_rule(order: int) -> tuple[Array, Array]:
    """1D nodes/weights (z, w) with sum(w) = 1 and E[f(Z)] ~= sum(w * f(z))."""
    if order > 300:
        # hermgauss weight recurrences overflow beyond this
        raise ValueError("quad_order above 300 is numerically unreliable")
    x, w = np.polynomial.hermite.hermgauss(order)
    z = np.sqrt(2.0) * x
    w = w / np.sqrt(np.pi)
    z.setflags(write=False)
    w.setflags(write=False)
    return z, w


@lru_cache(maxsize=None)
def tensor_rule(dim: int, order: int) -> tuple[Array, Array]:
    """Tensor Gauss-Hermite grid: points (order^dim, dim), weights (order^dim,)."""
    z, w = gauss_hermite_rule(order)
    grids = np.meshgrid(*([z] * dim), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    wgrids = np.meshgrid(*([w] * dim), indexing="ij")
    wts = np.ones(order**dim)
    for g in wgrids:
        wts = wts * g.ravel()
    pts.setflags(write=False)
    wts.setflags(write=False)
    return pts, wts


def split_gauss_rule_1d(order: int, breakpoints: Sequence[float] = (),
                        cutoff: float = 14.0) -> tuple[Array, Array]:
    """1D standard-normal rule with panel boundaries at the breakpoints.

    Gauss-Legendre panels between consecutive points of
    ``[-cutoff, *sorted(breakpoints), cutoff]`` with the normal density as an
    explicit weight factor.  Integrands that are smooth between breakpoints
    (e.g. carry |.| kinks or sign jumps exactly there) integrate to near
    machine precision; the mass beyond the cutoff is below 1e-40.
    """
    edges = np.concatenate(([-cutoff],
                            np.clip(np.sort(np.asarray(breakpoints, float)),
                                    -cutoff, cutoff),
                            [cutoff]))
    g, gw = np.polynomial.legendre.leggauss(order)
    zs, ws = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        if hi - lo < 1e-14:
            continue
        z = 0.5 * (hi - lo) * (g + 1.0) + lo
        w = 0.5 * (hi - lo) * gw * np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
        zs.append(z)
        ws.append(w)
    return np.concatenate(zs), np.concatenate(ws)


def split_normal_rule(dim: int, normal: Array, offsets: Sequence[float],
                      order_par: int = 32, order_perp: int = 20,
                      perp_splits: Sequence[float] = ()
                      ) -> tuple[Array, Array]:
    """Tensor rule for gamma_N, kink-aware along one direction.

    The coordinate along ``normal`` uses panelled Gauss-Legendre split at the
    given offsets; the orthogonal complement uses Gauss-Hermite, or panelled
    rules split at ``perp_splits`` on every tangential axis.  Exactly
    integrates (to rule precision) integrands whose only non-smoothness sits
    on the hyperplanes {<normal, x> = offset} (plus, optionally, the
    tangential split planes).
    """
    normal = np.asarray(normal, dtype=float)
    normal = normal / np.linalg.norm(normal)
    z1, w1 = split_gauss_rule_1d(order_par, offsets)
    if dim == 1:
        return z1[:, None] * normal[None, :], w1
    e1 = np.zeros(dim)
    e1[0] = 1.0
    v = normal - e1
    if np.linalg.norm(v) < 1e-14:
        Q = np.eye(dim)
    else:
        v = v / np.linalg.norm(v)
        Q = np.eye(dim) - 2.0 * np.outer(v, v)
    if perp_splits:
        za, wa = split_gauss_rule_1d(order_perp, perp_splits)
        grids = np.meshgrid(*([za] * (dim - 1)), indexing="ij")
        zp = np.stack([g.ravel() for g in grids], axis=-1)
        wp = np.ones(za.size ** (dim - 1))
        for g in np.meshgrid(*([wa] * (dim - 1)), indexing="ij"):
            wp = wp * g.ravel()
    else:
        zp, wp = tensor_rule(dim - 1, order_perp)
    pts = z1[:, None, None] * normal[None, None, :] \
        + (zp @ Q[:, 1:].T)[None, :, :]
    wts = (w1[:, None] * wp[None, :]).ravel()
    return pts.reshape(-1, dim), wts


def sample_gaussian(space: GaussianSpace, count: int, stream: int = 0) -> Array:
    """Draw ``count`` i.i.d. standard normal vectors, shape (count, dim).

    Deterministic given (seed, stream, count): the same leading block is
    produced for any larger count.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = space.rng(stream)
    return rng.standard_normal(size=(count, space.dim))


def _check_finite(vals: Array, pts: Array) -> None:
    finite = np.isfinite(vals)
    if not finite.all():
        bad = np.argwhere(~finite)[0]
        idx = bad[0]
        raise NonFiniteIntegrandError(pts[idx], np.asarray(vals)[tuple(bad)])


def expect(space: GaussianSpace, f: Callable[[Array], Array],
           method: str | None = None, stream: int = 0) -> Estimate:
    """Estimate the gamma-expectation of a scalar integrand.

    Parameters
    ----------
    f : callable
        Maps points of shape (m, dim) to values of shape (m,).
    method : {"quadrature", "monte-carlo", None}
        None selects the space default (quadrature for dim <= 4).

    Returns
    -------
    Estimate
        Quadrature estimates are exact for polynomials of per-axis degree
        < 2 * quad_order and carry std_error 0.  Monte Carlo estimates use
        mc_budget samples accumulated in fixed chunk order.

    Raises
    ------
    NonFiniteIntegrandError
        If the integrand evaluates to NaN/inf anywhere it is sampled.
    """
    method = method or space.default_method
    if method == "quadrature":
        pts, wts = tensor_rule(space.dim, space.quad_order)
        vals = np.asarray(f(pts), dtype=float)
        _check_finite(vals, pts)
        return Estimate(float(wts @ vals), 0.0, "quadrature")
    if method == "monte-carlo":
        n = space.mc_budget
        rng = space.rng(stream)
        total = 0.0
        total_sq = 0.0
        done = 0
        while done < n:
            m = min(_MC_CHUNK, n - done)
            pts = rng.standard_normal(size=(m, space.dim))
            vals = np.asarray(f(pts), dtype=float)
            _check_finite(vals, pts)
            total += float(vals.sum())
            total_sq += float((vals * vals).sum())
            done += m
        mean = total / n
        if n > 1:
            var = max(total_sq / n - mean * mean, 0.0) * n / (n - 1)
            se = float(np.sqrt(var / n))
        else:
            se = float("inf")
        return Estimate(mean, se, "monte-carlo")
    raise ValueError(f"unknown method {method!r}")


def gauss_density(space: GaussianSpace, x: Array) -> Array | float:
    """Density (2*pi)^(-N/2) * exp(-|x|^2 / 2) of gamma_N at x.

    Accepts a single point (dim,) or a batch (m, dim).
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = x[None, :] if single else x
    norm = (2.0 * np.pi) ** (-space.dim / 2.0)
    vals = norm * np.exp(-0.5 * np.einsum("ij,ij->i", pts, pts))
    return float(vals[0]) if single else vals
