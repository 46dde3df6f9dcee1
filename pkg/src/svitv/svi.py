"""Stochastic variational inequality checks and regularization sweeps.

A test process solves

    Z_t = Z_0 + int G ds + 1/2 sum int (B_i^d)^2 Z ds + sum int B_i^d Z dW^i

on the same Brownian paths as the solution ``X``.  For such ``Z`` the
inequality

    1/2 E|X_t - Z_t|^2 + E int_0^t Phi(X)
        <= 1/2 E|x - Z_0|^2 + E int_0^t Phi(Z) - E int_0^t (G, X - Z)

is evaluated on the step grid (trapezoid rule in time, Monte-Carlo mean over
paths in index order).  ``gap = RHS - LHS`` is nonnegative for the exact
limit object and nonnegative up to discretization error here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .operators import EnergyKind, _norm0, moreau_density, stencil
from .sde import ITO_EULER, IMPLICIT, SolverParams, _model, ensemble_path, iterate

CONSTANT = "constant"
REGULARIZED = "regularized"


class SviError(ValueError):
    pass


# --------------------------------------------------------------------------
# test processes


@dataclass(frozen=True, eq=False)
class TestProcessSpec:
    """How to build a test process on a given Brownian path.

    ``value`` for the constant variant; ``z0`` and ``params`` for the
    regularized one.
    """

    __test__ = False    # not a pytest class

    variant: str
    value: float = 0.0
    z0: np.ndarray | None = field(default=None, repr=False)
    params: SolverParams | None = None


def constant_spec(c):
    return TestProcessSpec(CONSTANT, value=float(c))


def regularized_spec(z0, params):
    if params.integrator != ITO_EULER:
        raise SviError("regularized test processes use the Ito-Euler scheme")
    if params.drift and params.drift_scheme != IMPLICIT:
        raise SviError("regularized test processes need the implicit drift")
    return TestProcessSpec(REGULARIZED, z0=np.asarray(z0, dtype=np.float64),
                           params=params)


def generator(z, params):
    """``G(Z) = J div Psi^lam(grad J Z) + eps Lap Z`` (flat arrays)."""
    m = _model(params)
    g = params.eps * (m.st.lap @ z)
    if params.drift:
        g = g + m.drift(z)
    return g


def _stream(spec, path, grid):
    """Yield ``(Z_k, G_k)`` for ``k = 0..n``."""
    n = path.steps
    if spec.variant == CONSTANT:
        z = np.full(grid.size, spec.value)
        g = np.zeros(grid.size)
        for _ in range(n + 1):
            yield z, g
        return
    p = spec.params
    for _, _, z in iterate(spec.z0, p, path):
        yield z, generator(z, p)


@dataclass(eq=False)
class TestProcess:
    __test__ = False

    spec: TestProcessSpec
    times: np.ndarray
    snapshots: np.ndarray       # (n + 1, *shape)
    generators: np.ndarray      # (n + 1, *shape)
    path: object = None

    @property
    def variant(self):
        return self.spec.variant

    def reconstruction_residual(self):
        """Largest relative defect of the discrete test equation.

        Each step is rebuilt from the stored data as
        ``Z_k + dt G_{k+1} + dt/2 sum (B^d)^2 Z_{k+1} + sum B^d Z_k dW``
        (the drift and the Ito correction are taken at the new level, as
        in the stepper) and compared with ``Z_{k+1}``.
        """
        if self.variant == CONSTANT:
            zs, gs = self.snapshots, self.generators
            return float(np.max(np.abs(np.diff(zs, axis=0)))
                         + np.max(np.abs(gs))) if len(zs) > 1 else 0.0
        p = self.spec.params
        m = _model(p)
        w = m.w
        worst = 0.0
        zs = self.snapshots.reshape(len(self.snapshots), -1)
        gs = self.generators.reshape(len(self.generators), -1)
        for k in range(len(zs) - 1):
            dW = self.path.increments[k]
            rebuilt = zs[k] + m.noise(zs[k], dW) + p.dt * gs[k + 1]
            if m.with_b2:
                # dt/2 sum (B^d)^2 Z = Z - M Z - dt eps Lap Z
                rebuilt += (zs[k + 1] - m.lin(zs[k + 1])
                            - p.dt * p.eps * (m.st.lap @ zs[k + 1]))
            err = rebuilt - zs[k + 1]
            scale = math.sqrt(np.dot(w, zs[k + 1] ** 2)) + 1e-300
            worst = max(worst, math.sqrt(np.dot(w, err * err)) / scale)
        return worst


def _collect(spec, path, grid):
    zs, gs = [], []
    for z, g in _stream(spec, path, grid):
        zs.append(z.reshape(grid.shape).copy())
        gs.append(g.reshape(grid.shape).copy())
    return TestProcess(spec, path.times, np.array(zs), np.array(gs), path)


def test_process_constant(c, params, path):
    """``Z_t = c`` and ``G = 0`` on the time grid of ``path``."""
    return _collect(constant_spec(c), path, params.grid)


def test_process_regularized(z0, params, path):
    """Solution of the regularized equation with parameters ``params``
    started at ``z0`` and driven by ``path``; ``G`` is its drift."""
    spec = regularized_spec(z0, params)
    return _collect(spec, path, params.grid)


test_process_constant.__test__ = False
test_process_regularized.__test__ = False


# --------------------------------------------------------------------------
# the inequality


def _density(s, kind):
    if kind.kind == "tv":
        return s
    if kind.kind == "power":
        return s ** kind.p / kind.p
    if kind.kind == "moreau_tv":
        return moreau_density(s, kind.lam, 1)
    return moreau_density(s, kind.lam, kind.p)


def _check_kind(kind, params):
    want_p = 1.0 if kind.kind in ("tv", "moreau_tv") else kind.p
    if want_p != params.p:
        raise SviError(f"energy {kind} does not belong to the drift family "
                       f"with p = {params.p}")


def _cumtrapz(y, dt):
    out = np.zeros_like(y)
    out[1:] = np.cumsum(0.5 * dt * (y[1:] + y[:-1]))
    return out


@dataclass(eq=False)
class SviReport:
    times: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    n_paths: int
    kind: EnergyKind

    @property
    def gap(self):
        return self.rhs - self.lhs

    def worst_excursion(self):
        """``max(0, -min_t gap(t))``."""
        return max(0.0, -float(np.min(self.gap)))

    def rows(self):
        return zip(self.times, self.lhs, self.rhs, self.gap)


def _path_terms(xs, zs, gs, w, G, kind):
    """Per-step ``1/2 |X - Z|^2``, ``Phi(X)``, ``Phi(Z)``, ``(G, X - Z)``."""
    out = np.empty((4, len(xs)))
    for k, (x, z, g) in enumerate(zip(xs, zs, gs)):
        e = x - z
        out[0, k] = 0.5 * np.dot(w, e * e)
        out[1, k] = np.dot(w, _density(_norm0(np.stack([M @ x for M in G])),
                                       kind))
        out[2, k] = np.dot(w, _density(_norm0(np.stack([M @ z for M in G])),
                                       kind))
        out[3, k] = np.dot(w, g * e)
    return out


def _report(terms, dt):
    """Mean the per-path terms (index order) and form both sides."""
    t = np.mean(np.stack(terms), axis=0)
    half_sq, phx, phz, cross = t
    lhs = half_sq + _cumtrapz(phx, dt)
    rhs = half_sq[0] + _cumtrapz(phz, dt) - _cumtrapz(cross, dt)
    return lhs, rhs


def svi_gap(X, Z, kind, params):
    """Gap for stored trajectories.

    ``X`` is a list of per-path arrays ``(n + 1, *shape)`` and ``Z`` the
    list of :class:`TestProcess` driven by the same paths.
    """
    if len(X) != len(Z) or not X:
        raise SviError(f"path-count mismatch: {len(X)} solutions, "
                       f"{len(Z)} test processes")
    _check_kind(kind, params)
    st = stencil(params.grid)
    terms = []
    for x, z in zip(X, Z):
        if x.shape != z.snapshots.shape:
            raise SviError(f"grid mismatch: {x.shape} vs {z.snapshots.shape}")
        n = len(x)
        terms.append(_path_terms(x.reshape(n, -1),
                                 z.snapshots.reshape(n, -1),
                                 z.generators.reshape(n, -1),
                                 st.weights, st.grads, kind))
    lhs, rhs = _report(terms, params.dt)
    return SviReport(np.arange(len(lhs)) * params.dt, lhs, rhs, len(X), kind)


def svi_check(x0, params, spec, n_paths, base_seed, kind=None, refine=1):
    """Stream ``n_paths`` paths of ``X`` and of the test process ``spec`` on
    shared drivers ``ensemble_path(params, base_seed, k, refine)``."""
    if n_paths < 1:
        raise SviError("n_paths must be >= 1")
    kind = params.energy if kind is None else kind
    _check_kind(kind, params)
    if spec.variant == REGULARIZED:
        zp = spec.params
        if zp.grid is not params.grid:
            raise SviError("grid mismatch between solution and test process")
        if (zp.dt, zp.T) != (params.dt, params.T) or \
                tuple(zp.fields) != tuple(params.fields):
            raise SviError("test process must share noise fields and the "
                           "step grid with the solution")
    st = stencil(params.grid)
    w, G = st.weights, st.grads
    terms = []
    for k in range(n_paths):
        path = ensemble_path(params, base_seed, k, refine)
        acc = np.empty((4, path.steps + 1))
        for j, ((_, _, x), (z, g)) in enumerate(zip(
                iterate(x0, params, path), _stream(spec, path, params.grid))):
            acc[:, j] = _path_terms([x], [z], [g], w, G, kind)[:, 0]
        terms.append(acc)
    lhs, rhs = _report(terms, params.dt)
    return SviReport(np.arange(len(lhs)) * params.dt, lhs, rhs, n_paths, kind)


# --------------------------------------------------------------------------
# regularization ladder


@dataclass(eq=False)
class CauchyTable:
    """Pairwise ``sup_t (E |X^a_t - X^b_t|^2)^{1/2}`` over ladder entries."""

    ladder: list
    distance: np.ndarray
    n_paths: int

    def to_reference(self, ref):
        return np.array([self.distance[i, ref] for i in range(len(self.ladder))
                         if i != ref])

    def fit_exponent(self, name, ref):
        """Least-squares slope of ``log d(i, ref)`` against ``log x_i`` where
        ``x_i = lam_i + lam_ref`` for ``name = "lam"`` and the parameter value
        itself for ``"eps"`` and ``"delta"``."""
        col = {"eps": 0, "lam": 1, "delta": 2}[name]
        xs, ys = [], []
        for i, entry in enumerate(self.ladder):
            if i == ref or self.distance[i, ref] <= 0:
                continue
            x = entry[col] + (self.ladder[ref][col] if name == "lam" else 0.0)
            if x > 0:
                xs.append(math.log(x))
                ys.append(math.log(self.distance[i, ref]))
        if len(xs) < 2:
            raise SviError("need two nonzero distances to fit an exponent")
        return float(np.polyfit(xs, ys, 1)[0])

    def rows(self):
        for i, a in enumerate(self.ladder):
            for j, b in enumerate(self.ladder):
                yield (*a, *b, self.distance[i, j])


def regularization_sweep(x0, params, ladder, n_paths, base_seed):
    """Run every ``(eps, lam, delta)`` of ``ladder`` on shared drivers and
    tabulate sup-in-time root-mean-square distances between all pairs."""
    if n_paths < 1:
        raise SviError("n_paths must be >= 1")
    ladder = [tuple(float(v) for v in e) for e in ladder]
    runs = [replace(params, eps=e, lam=lam, delta=d, check_fields=False)
            for e, lam, d in ladder]
    w = stencil(params.grid).weights
    L = len(runs)
    sums = None
    for k in range(n_paths):
        path = ensemble_path(params, base_seed, k)
        traj = np.stack([np.array([u.copy() for _, _, u in
                                   iterate(x0, p, path)]) for p in runs])
        if sums is None:
            sums = np.zeros((L, L, traj.shape[1]))
        for a in range(L):
            for b in range(a + 1, L):
                e = traj[a] - traj[b]
                sums[a, b] += e * e @ w
    mean = sums / n_paths
    dist = np.zeros((L, L))
    for a in range(L):
        for b in range(a + 1, L):
            dist[a, b] = dist[b, a] = math.sqrt(float(np.max(mean[a, b])))
    return CauchyTable(ladder, dist, n_paths)
