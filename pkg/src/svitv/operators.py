"""Discrete calculus on the grids of :mod:`svitv.geometry`.

The gradient is a forward difference attached to each node: on the torus
``(u(xi + h e_a) - u(xi)) / h``, which is a second-order approximation of
the derivative at the half step ``xi + h e_a / 2``.  On the disk the node
vector is ``(s_j (u_{j+1} - u_j) / dr, (u_{k+1} - u_k) / (r_j dtheta))`` in
the polar frame, with ``s_j = sqrt(r_{j+1/2} / r_j)`` so that the node-weighted
Dirichlet energy equals the finite-volume one, and a zero radial component on
the outer ring (homogeneous Neumann condition).

Everything else is derived from the gradient and the node weights ``w``:

* ``divergence = -W^{-1} G^T W`` (exact negative adjoint),
* ``laplacian = divergence o gradient``,
* ``B = (A - A^*) / 2`` with ``A u = <b, gradient u>``, which is the average
  of the advective form and ``div(b u)``; it is skew-adjoint by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .geometry import DISK, inner_product, norm
from .linalg import cg


@dataclass(frozen=True, eq=False)
class Stencil:
    grads: tuple        # one (n, n) CSR matrix per vector component
    grads_t: tuple      # their transposes
    weights: np.ndarray  # flat node weights
    lap: sp.csr_matrix
    lap_diag: np.ndarray


@lru_cache(maxsize=None)
def stencil(grid):
    n = grid.size
    idx = np.arange(n).reshape(grid.shape)
    grads = []
    if grid.kind == DISK:
        dr, dth = grid.spacing
        r = grid.r
        s = np.sqrt((r + 0.5 * dr) / r)
        rows = idx[:-1].ravel()
        cols = idx[1:].ravel()
        coef = np.repeat(s[:-1] / dr, grid.shape[1])
        Gr = sp.csr_matrix(
            (np.concatenate([coef, -coef]),
             (np.concatenate([rows, rows]), np.concatenate([cols, rows]))),
            shape=(n, n))
        rows = idx.ravel()
        cols = np.roll(idx, -1, axis=1).ravel()
        coef = np.repeat(1.0 / (r * dth), grid.shape[1])
        Gt = sp.csr_matrix(
            (np.concatenate([coef, -coef]),
             (np.concatenate([rows, rows]), np.concatenate([cols, rows]))),
            shape=(n, n))
        grads = [Gr, Gt]
    else:
        for a, h in enumerate(grid.spacing):
            rows = idx.ravel()
            cols = np.roll(idx, -1, axis=a).ravel()
            coef = np.full(n, 1.0 / h)
            grads.append(sp.csr_matrix(
                (np.concatenate([coef, -coef]),
                 (np.concatenate([rows, rows]),
                  np.concatenate([cols, rows]))), shape=(n, n)))
    w = np.ascontiguousarray(grid.weights.ravel())
    Winv = sp.diags(1.0 / w)
    W = sp.diags(w)
    lap = -(Winv @ sum(G.T @ W @ G for G in grads)).tocsr()
    lap.sort_indices()
    grads_t = tuple(G.T.tocsr() for G in grads)
    return Stencil(tuple(grads), grads_t, w, lap, lap.diagonal().copy())


# --------------------------------------------------------------------------
# first and second order operators


def gradient(u, grid):
    st = stencil(grid)
    flat = np.asarray(u, dtype=np.float64).ravel()
    return np.stack([(G @ flat).reshape(grid.shape) for G in st.grads])


def divergence(F, grid):
    st = stencil(grid)
    F = np.asarray(F, dtype=np.float64)
    acc = np.zeros(grid.size)
    for a, Gt in enumerate(st.grads_t):
        acc += Gt @ (st.weights * F[a].ravel())
    return (-acc / st.weights).reshape(grid.shape)


def laplacian_neumann(u, grid):
    return (stencil(grid).lap @ np.asarray(u, float).ravel()).reshape(
        grid.shape)


def resolvent(f, delta, grid, solver_tol=1e-12):
    """``(I - delta Lap)^{-1} f`` by Jacobi-preconditioned CG."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    f = np.asarray(f, dtype=np.float64)
    if delta == 0:
        return f.copy()
    st = stencil(grid)
    L = st.lap
    flat = f.ravel()
    x, _ = cg(lambda v: v - delta * (L @ v), flat, st.weights, x0=flat,
              tol=solver_tol, diag=1.0 - delta * st.lap_diag,
              preserve_mean=True)
    return x.reshape(grid.shape)


@lru_cache(maxsize=None)
def noise_matrix(b):
    """Sparse skew-adjoint matrix of ``u -> <b, grad u>``."""
    grid = b.grid
    st = stencil(grid)
    A = sum(sp.diags(b.frame[a].ravel()) @ G for a, G in enumerate(st.grads))
    K = (sp.diags(st.weights) @ A).tocsr()
    S = 0.5 * (K - K.T)
    B = (sp.diags(1.0 / st.weights) @ S).tocsr()
    B.sort_indices()
    return B


def apply_B(u, b):
    return (noise_matrix(b) @ np.asarray(u, float).ravel()).reshape(
        b.grid.shape)


def apply_B_squared(u, b):
    B = noise_matrix(b)
    return (B @ (B @ np.asarray(u, float).ravel())).reshape(b.grid.shape)


def commutation_check(b, delta, u, solver_tol=1e-12):
    """``||B J u - J B u|| / ||u||``."""
    g = b.grid
    nu = norm(u, g)
    if nu == 0.0:
        return 0.0
    lhs = apply_B(resolvent(u, delta, g, solver_tol), b)
    rhs = resolvent(apply_B(u, b), delta, g, solver_tol)
    return norm(lhs - rhs, g) / nu


def dense_operator(apply, grid):
    """Materialize a linear map on fields as a dense matrix (small grids)."""
    n = grid.size
    M = np.empty((n, n))
    e = np.zeros(n)
    for k in range(n):
        e[k] = 1.0
        M[:, k] = np.asarray(apply(e.reshape(grid.shape))).ravel()
        e[k] = 0.0
    return M


# --------------------------------------------------------------------------
# Yosida approximations


def _norm0(xi):
    return np.sqrt(np.sum(np.asarray(xi, float) ** 2, axis=0))


def _power_profile(s, lam, p, maxiter=200):
    """Solve ``r + lam r^(p-1) = s`` for every entry of ``s``.

    Works with ``g = r^(p-1)``, which satisfies the convex increasing
    equation ``g^q + lam g = s`` (``q = 1/(p-1)``); Newton started to the
    right of the root then decreases monotonically, inside a bisection
    bracket as a safeguard.  Returns ``(g, r)``.
    """
    s = np.asarray(s, dtype=np.float64)
    q = 1.0 / (p - 1.0)
    hi = np.minimum(s / lam, s ** (p - 1.0))
    lo = np.zeros_like(s)
    g = hi.copy()
    for _ in range(maxiter):
        h = g**q + lam * g - s
        hi = np.where(h > 0, g, hi)
        lo = np.where(h <= 0, g, lo)
        step = h / (q * g ** (q - 1.0) + lam)
        g_new = g - step
        bad = (g_new < lo) | (g_new > hi) | ~np.isfinite(g_new)
        g_new = np.where(bad, 0.5 * (lo + hi), g_new)
        done = np.abs(g_new - g) <= 1e-14 * np.maximum(g_new, 1e-300)
        g = g_new
        if np.all(done | (s == 0)):
            return g, g**q
    raise ArithmeticError("Yosida root finder did not converge")


def yosida_sgn(xi, lam):
    """Yosida approximation of the sign graph; vector axis first."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    xi = np.asarray(xi, dtype=np.float64)
    return xi / np.maximum(lam, _norm0(xi))


def yosida_power(xi, lam, p):
    """Yosida approximation of ``xi -> |xi|^(p-2) xi``; vector axis first."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if not 1.0 < p < 2.0:
        raise ValueError("p must lie in (1, 2)")
    xi = np.asarray(xi, dtype=np.float64)
    s = _norm0(xi)
    g, _ = _power_profile(s, lam, p)
    scale = np.where(s > 0, g / np.where(s > 0, s, 1.0), 0.0)
    return xi * scale


def yosida_map(xi, lam, p):
    return yosida_sgn(xi, lam) if p == 1 else yosida_power(xi, lam, p)


def yosida_jacobian(xi, lam, p):
    """Coefficients ``(a, g', n)`` of ``DPsi^lam(xi) = a (I - n n^T) + g' n n^T``.

    ``Psi^lam(xi) = g(|xi|) xi / |xi|``, ``a = g / |xi|`` (the limit ``1/lam``
    at ``xi = 0``) and ``n = xi / |xi|``.
    """
    xi = np.asarray(xi, dtype=np.float64)
    s = _norm0(xi)
    safe = np.where(s > 0, s, 1.0)
    if p == 1:
        a = 1.0 / np.maximum(lam, s)
        gp = np.where(s <= lam, 1.0 / lam, 0.0)
    else:
        g, _ = _power_profile(s, lam, p)
        q = 1.0 / (p - 1.0)
        gp = 1.0 / (q * g ** (q - 1.0) + lam)
        a = np.where(s > 0, g / safe, 1.0 / lam)
    return a, gp, xi / safe


def yosida_derivative(xi, lam, p):
    """Return ``apply(eta)`` computing ``DPsi^lam(xi) eta`` pointwise."""
    a, gp, n = yosida_jacobian(xi, lam, p)

    def apply(eta):
        proj = np.sum(n * eta, axis=0)
        return a * eta + (gp - a) * n * proj

    return apply


def moreau_density(s, lam, p):
    """Moreau envelope ``phi^lam`` of ``phi = |.|^p / p`` at ``|xi| = s``."""
    s = np.asarray(s, dtype=np.float64)
    if p == 1:
        return np.where(s <= lam, s * s / (2 * lam), s - 0.5 * lam)
    g, r = _power_profile(s, lam, p)
    return r**p / p + 0.5 * lam * g * g


# --------------------------------------------------------------------------
# energies


@dataclass(frozen=True)
class EnergyKind:
    """``kind`` is one of ``tv``, ``power``, ``moreau_tv``, ``moreau_power``."""

    kind: str
    p: float = 1.0
    lam: float | None = None

    def __post_init__(self):
        if self.kind not in ("tv", "power", "moreau_tv", "moreau_power"):
            raise ValueError(f"unknown energy kind {self.kind!r}")
        if self.kind in ("power", "moreau_power") and not 1 < self.p < 2:
            raise ValueError("p out of range (1,2)")
        if self.kind.startswith("moreau") and not (self.lam and self.lam > 0):
            raise ValueError("Moreau energies need lambda > 0")


def TV():
    return EnergyKind("tv")


def Power(p):
    return EnergyKind("power", p=p)


def MoreauTV(lam):
    return EnergyKind("moreau_tv", lam=lam)


def MoreauPower(p, lam):
    return EnergyKind("moreau_power", p=p, lam=lam)


def energy_family(p, lam=None):
    """The energy matching drift exponent ``p`` (Moreau variant if ``lam``)."""
    if lam is None:
        return TV() if p == 1 else Power(p)
    return MoreauTV(lam) if p == 1 else MoreauPower(p, lam)


def energy(u, grid, kind):
    s = _norm0(gradient(u, grid))
    if kind.kind == "tv":
        dens = s
    elif kind.kind == "power":
        dens = s**kind.p / kind.p
    elif kind.kind == "moreau_tv":
        dens = moreau_density(s, kind.lam, 1)
    else:
        dens = moreau_density(s, kind.lam, kind.p)
    return float(np.sum(grid.weights * dens))


def grad_sq(u, grid):
    """``||grad u||^2`` in the node-weighted norm."""
    return float(np.sum(grid.weights * np.sum(gradient(u, grid) ** 2,
                                              axis=0)))


__all__ = [
    "gradient", "divergence", "laplacian_neumann", "resolvent", "apply_B",
    "apply_B_squared", "commutation_check", "noise_matrix", "yosida_sgn",
    "yosida_power", "yosida_map", "yosida_derivative", "yosida_jacobian",
    "moreau_density",
    "energy", "EnergyKind", "TV", "Power", "MoreauTV", "MoreauPower",
    "energy_family", "grad_sq", "inner_product", "norm", "dense_operator",
    "stencil",
]

