"""Time stepping for the regularized stochastic TV / p-Laplace flow.

The equation is integrated in Ito form on a uniform step grid ``t_k = k dt``:

    dX = [J div Psi^lam(grad J X) + eps Lap X + 1/2 sum_i (B_i^d)^2 X] dt
         + sum_i B_i^d X dW^i,          B_i^d = B_i J,  J = (I - delta Lap)^{-1}

with ``(B_i^d)^2`` realized as ``J B_i^2 J`` (self-adjoint, and equal to
``B_i J B_i J`` whenever ``B_i`` commutes with the Laplacian).

One Ito-Euler step solves

    (I - dt eps Lap - dt/2 sum (B^d)^2) u+ - dt D(u+) = u + sum B^d u dW

where ``D(v) = J div Psi^lam(grad J v)``.  By default ``D`` is taken at the new
time level ("implicit" drift): ``u+`` is the unique minimizer of the strongly
convex functional

    E(v) = 1/2 (v, M v) - (f, v) + dt Phi_lam(J v),

found by a damped Newton iteration.  ``drift_scheme="explicit"`` evaluates
``D(u)`` instead; it is only stable for ``dt`` of order ``lam h^2``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, splu
from scipy.sparse.linalg import cg as cg_scipy

from .fields import validate_assumption
from .geometry import DISK
from .linalg import SolverError, cg
from .operators import (_norm0, energy_family, moreau_density, noise_matrix,
                        stencil, yosida_jacobian, yosida_map)

ITO_EULER = "ito-euler"
STRATONOVICH_HEUN = "stratonovich-heun"
IMPLICIT = "implicit"
EXPLICIT = "explicit"


class StabilityError(ValueError):
    """Step size too large for the explicit noise term."""


class StepError(RuntimeError):
    def __init__(self, step, cause):
        super().__init__(f"step {step} failed: {cause}")
        self.step = step
        self.cause = cause


def n_steps(T, dt):
    """``ceil(T / dt)``, robust to ``T / dt`` landing just above an integer."""
    return max(1, math.ceil(T / dt * (1.0 - 1e-12)))


@dataclass(frozen=True)
class SolverParams:
    """Parameters of the regularized equation and of the time stepper.

    ``fields`` is a tuple of :class:`~svitv.fields.CoefficientField` sharing
    one grid.  ``ito_only`` drops the 1/2 sum B^2 correction (a plain Ito
    equation, kept for the imaging variant; it is not the Stratonovich
    equation).  ``grid`` is required when there are no fields.
    """

    eps: float = 0.0
    lam: float = 1e-2
    delta: float = 0.0
    p: float = 1.0
    T: float = 1.0
    dt: float = 1e-2
    fields: tuple = ()
    grid: object = None
    integrator: str = ITO_EULER
    drift: bool = True
    drift_scheme: str = IMPLICIT
    ito_only: bool = False
    solver_tol: float = 1e-10
    check_fields: bool = True

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        errors = []
        if not self.eps >= 0:
            errors.append(f"eps must be >= 0, got {self.eps}")
        if not self.lam > 0:
            errors.append(f"lambda must be > 0, got {self.lam}")
        if not self.delta >= 0:
            errors.append(f"delta must be >= 0, got {self.delta}")
        if not 1 <= self.p < 2:
            errors.append("p out of range [1,2)")
        if not self.T > 0:
            errors.append(f"T must be > 0, got {self.T}")
        if not self.dt > 0:
            errors.append(f"dt must be > 0, got {self.dt}")
        elif self.T > 0 and self.dt > self.T:
            errors.append(f"dt = {self.dt} exceeds T = {self.T}")
        if self.integrator not in (ITO_EULER, STRATONOVICH_HEUN):
            errors.append(f"unknown integrator {self.integrator!r}")
        if self.drift_scheme not in (IMPLICIT, EXPLICIT):
            errors.append(f"unknown drift scheme {self.drift_scheme!r}")
        grids = {id(b.grid) for b in self.fields}
        if len(grids) > 1:
            errors.append("noise fields live on different grids")
        if self.fields:
            g = self.fields[0].grid
            if self.grid is None:
                object.__setattr__(self, "grid", g)
            elif self.grid is not g:
                errors.append("noise fields and grid disagree")
        elif self.grid is None:
            errors.append("a grid is required when there are no noise fields")
        if errors:
            raise ValueError("; ".join(errors))
        if self.fields and self.check_fields:
            report = validate_assumption(list(self.fields), self.grid)
            if not report.passed:
                raise ValueError("noise fields fail the assumption check:\n"
                                 + report.table())

    @property
    def steps(self):
        return n_steps(self.T, self.dt)

    @property
    def energy(self):
        return energy_family(self.p)

    @property
    def moreau_energy(self):
        return energy_family(self.p, self.lam)


# --------------------------------------------------------------------------
# Brownian drivers


def path_seed(base_seed, index):
    """Seed material for ensemble member ``index``.

    ``SeedSequence(base_seed, spawn_key=(index,))`` is the ``index``-th child
    of ``SeedSequence(base_seed)``: streams for different indices are
    independent and each depends only on ``(base_seed, index)``.
    """
    return np.random.SeedSequence(int(base_seed), spawn_key=(int(index),))


@dataclass(frozen=True, eq=False)
class BrownianPath:
    seed: int
    index: int
    dt: float
    increments: np.ndarray = field(repr=False)   # (n_steps, N)

    @property
    def n_fields(self):
        return self.increments.shape[1]

    @property
    def steps(self):
        return self.increments.shape[0]

    @property
    def times(self):
        return np.arange(self.steps + 1) * self.dt


def brownian_path(seed, N, T, dt, index=0):
    """``ceil(T/dt)`` i.i.d. N(0, dt) increments per component (PCG64)."""
    if N < 0:
        raise ValueError("N must be >= 0")
    n = n_steps(T, dt)
    rng = np.random.Generator(np.random.PCG64(path_seed(seed, index)))
    inc = rng.standard_normal((n, N)) * math.sqrt(dt)
    inc.setflags(write=False)
    return BrownianPath(int(seed), int(index), float(dt), inc)


def coarsen(path, factor):
    """The same Brownian motion sampled on a grid ``factor`` times coarser."""
    n = path.steps
    if n % factor:
        raise ValueError(f"{n} steps not divisible by {factor}")
    inc = path.increments.reshape(n // factor, factor, -1).sum(axis=1)
    inc.setflags(write=False)
    return BrownianPath(path.seed, path.index, path.dt * factor, inc)


# --------------------------------------------------------------------------
# discrete model


def stability_number(fields, dt):
    """``dt * sum_i max_x sum_a (b_a / spacing_a)^2`` over the noise fields."""
    total = 0.0
    for b in fields:
        g = b.grid
        if g.kind == DISK:
            dr, dth = g.spacing
            sp_r = np.full(g.shape, dr)
            sp_t = np.broadcast_to((g.r * dth)[:, None], g.shape)
            k2 = (b.frame[0] / sp_r) ** 2 + (b.frame[1] / sp_t) ** 2
        else:
            k2 = sum((b.frame[a] / h) ** 2 for a, h in enumerate(g.spacing))
        total += float(np.max(k2))
    return dt * total


class _Model:
    """Flat-array operators for one parameter set."""

    def __init__(self, params):
        self.params = params
        g = params.grid
        self.grid = g
        st = stencil(g)
        self.st = st
        self.w = st.weights
        self.G = st.grads
        self.Gt = st.grads_t
        self.B = [noise_matrix(b) for b in params.fields]
        dt, eps = params.dt, params.eps
        self.with_b2 = (params.integrator == ITO_EULER and not params.ito_only
                        and bool(self.B))
        W = sp.diags(self.w)
        # W M, the symmetric matrix of the linear part when delta = 0
        K = W - dt * eps * (W @ st.lap)
        if self.with_b2 and params.delta == 0:
            for B in self.B:
                K = K - 0.5 * dt * (W @ (B @ B))
        self.K = sp.csc_matrix(0.5 * (K + K.T))
        self._lu = None
        if params.delta == 0:
            self._lu = splu(self.K)
        self.lin_diag = 1.0 - dt * eps * st.lap_diag
        self._prec = None
        self.inner_tol = 1e-6
        self.prec_stats = [0, 0]    # factorizations, preconditioned CG steps

    # resolvent and building blocks
    def J(self, v):
        d = self.params.delta
        if d == 0:
            return v
        L = self.st.lap
        x, _ = cg(lambda y: y - d * (L @ y), v, self.w, x0=v,
                  tol=min(self.params.solver_tol, 1e-12),
                  diag=1.0 - d * self.st.lap_diag, preserve_mean=True)
        return x

    def grad(self, v):
        return np.stack([G @ v for G in self.G])

    def div(self, F):
        acc = np.zeros_like(F[0])
        for a, Gt in enumerate(self.Gt):
            acc += Gt @ (self.w * F[a])
        return -acc / self.w

    def Bd(self, i, v):
        return self.B[i] @ self.J(v)

    def noise(self, v, dW):
        out = np.zeros_like(v)
        Jv = self.J(v) if self.B else v
        for i, B in enumerate(self.B):
            if dW[i] != 0.0:
                out += dW[i] * (B @ Jv)
        return out

    def lin(self, v):
        """``M v`` with ``M = I - dt eps Lap - dt/2 sum J B^2 J``."""
        p = self.params
        out = v - p.dt * p.eps * (self.st.lap @ v)
        if self.with_b2:
            Jv = self.J(v)
            acc = np.zeros_like(v)
            for B in self.B:
                acc += B @ (B @ Jv)
            out -= 0.5 * p.dt * self.J(acc)
        return out

    def solve_lin(self, rhs, x0=None):
        """``M^{-1} rhs``; with ``x0`` the correction ``M^{-1}(rhs - M x0)``
        is solved for, so an exact ``x0`` comes back unchanged."""
        if self._lu is not None:
            if x0 is None:
                x = self._lu.solve(self.w * rhs)
            else:
                r = rhs - self.lin(x0)
                if not r.any():
                    return x0.copy()
                x = x0 + self._lu.solve(self.w * r)
        else:
            x, _ = cg(self.lin, rhs, self.w, x0=rhs if x0 is None else x0,
                      tol=self.params.solver_tol, diag=self.lin_diag,
                      preserve_mean=True)
        return self._fix_mean(x, rhs)

    def _fix_mean(self, x, target):
        w = self.w
        return x + (np.dot(w, target) - np.dot(w, x)) / w.sum()

    # nonlinear drift
    def drift(self, v):
        p = self.params
        Jv = self.J(v)
        return self.J(self.div(yosida_map(self.grad(Jv), p.lam, p.p)))

    def phi_lam(self, v):
        p = self.params
        s = _norm0(self.grad(self.J(v)))
        return float(np.dot(self.w, moreau_density(s, p.lam, p.p)))

    def objective(self, v, f):
        w = self.w
        return (0.5 * np.dot(w, v * self.lin(v)) - np.dot(w, f * v)
                + self.params.dt * self.phi_lam(v))

    def _pattern(self):
        """Map node coefficients ``c_ij`` to the entries of
        ``K + dt sum_ij G_i^T diag(w c_ij) G_j`` in a fixed CSC pattern."""
        if getattr(self, "_pat", None) is not None:
            return self._pat
        n, d = self.grid.size, len(self.G)
        rows, cols, ks, vals = [], [], [], []
        for i in range(d):
            Gi = self.G[i].tocsr()
            Gi.sort_indices()
            for j in range(d):
                Gj = self.G[j].tocsr()
                Gj.sort_indices()
                ki = np.repeat(np.arange(n), np.diff(Gi.indptr))
                cnt = np.diff(Gj.indptr)[ki]
                e = np.repeat(np.arange(Gi.nnz), cnt)
                start = np.repeat(Gj.indptr[ki], cnt)
                offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt,
                                                        cnt)
                partner = start + offs
                rows.append(Gi.indices[e])
                cols.append(Gj.indices[partner])
                ks.append(ki[e] + (i * d + j) * n)
                vals.append(Gi.data[e] * Gj.data[partner])
        rows, cols = np.concatenate(rows), np.concatenate(cols)
        Kc = self.K.tocoo()
        keys = np.unique(np.concatenate([cols * n + rows,
                                         Kc.col * n + Kc.row]))
        T = sp.csr_matrix(
            (np.concatenate(vals),
             (np.searchsorted(keys, cols * n + rows), np.concatenate(ks))),
            shape=(len(keys), d * d * n))
        kdata = np.zeros(len(keys))
        np.add.at(kdata, np.searchsorted(keys, Kc.col * n + Kc.row), Kc.data)
        indptr = np.searchsorted(keys // n, np.arange(n + 1))
        self._pat = (T, kdata, keys % n, indptr)
        return self._pat

    def _hessian_solve(self, coeffs, rhs):
        """Solve ``(M + dt J G^* C G J) x = rhs`` with ``C`` given per node
        by ``coeffs[i][j]`` (symmetric, positive semidefinite)."""
        p = self.params
        d = len(self.G)
        if self._lu is not None:
            T, kdata, indices, indptr = self._pattern()
            c = np.concatenate([self.w * coeffs[i][j] for i in range(d)
                                for j in range(d)])
            H = sp.csc_matrix((kdata + p.dt * (T @ c), indices, indptr),
                              shape=(self.grid.size,) * 2)
            b = self.w * rhs
            # a factorization of an earlier Hessian is a good preconditioner
            # for the slowly varying Newton matrices; refactor when it is not
            if self._prec is not None:
                count = [0]

                def cb(_):
                    count[0] += 1

                x, info = cg_scipy(H, b, rtol=self.inner_tol, maxiter=6,
                                   M=self._prec, callback=cb)
                if info == 0:
                    self.prec_stats[1] += count[0]
                    return x
            lu = splu(H, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                      options={"SymmetricMode": True})
            self._prec = LinearOperator(H.shape, lu.solve)
            self.prec_stats[0] += 1
            return lu.solve(b)

        def hess(y):
            xi = self.grad(self.J(y))
            F = np.stack([sum(coeffs[i][j] * xi[j] for j in range(d))
                          for i in range(d)])
            return self.lin(y) - p.dt * self.J(self.div(F))

        x, _ = cg(hess, rhs, self.w, tol=1e-12, diag=self.lin_diag,
                  preserve_mean=True)
        return x

    def solve_implicit(self, f, v0, dual=None, maxiter=200):
        """Minimize ``1/2 (v, M v) - (f, v) + dt Phi_lam(J v)``.

        TV (``p = 1``) uses the primal-dual Newton method of Chan, Golub and
        Mulet with the dual variable kept in the unit ball; ``p > 1`` uses
        plain Newton on the (C^1) Yosida map.  Both are damped by Armijo
        backtracking on the objective.  Returns ``(v, dual)``.
        """
        p = self.params
        dt, w, lam = p.dt, self.w, p.lam
        d = len(self.G)
        tv = p.p == 1
        v = self._fix_mean(v0, f)
        fnorm = math.sqrt(np.dot(w, f * f)) + 1e-300
        if tv and (dual is None or dual.shape != (d, v.size)):
            xi = self.grad(self.J(v))
            dual = xi / np.maximum(lam, _norm0(xi))
        E = self.objective(v, f)
        for it in range(maxiter):
            xi = self.grad(self.J(v))
            r = self.lin(v) - f - dt * self.J(self.div(yosida_map(xi, lam,
                                                                  p.p)))
            rnorm = math.sqrt(np.dot(w, r * r))
            if rnorm <= p.solver_tol * fnorm:
                return v, dual
            if tv:
                s = _norm0(xi)
                mm = np.maximum(lam, s)
                chi = s > lam
                n = xi / np.where(s > 0, s, 1.0)
                coeffs = [[(float(i == j) - chi * 0.5 * (dual[i] * n[j]
                                                         + n[i] * dual[j]))
                           / mm for j in range(d)] for i in range(d)]
            else:
                a, gp, n = yosida_jacobian(xi, lam, p.p)
                coeffs = [[(gp - a) * n[i] * n[j] + (a if i == j else 0.0)
                           for j in range(d)] for i in range(d)]
            dv = self._hessian_solve(coeffs, -r)
            dv -= np.dot(w, dv) / w.sum()
            slope = np.dot(w, r * dv)
            alpha = 1.0
            for _ in range(40):
                En = self.objective(v + alpha * dv, f)
                if En <= E + 1e-4 * alpha * slope:
                    break
                # at the minimizer E is flat to rounding
                if abs(En - E) <= 1e-13 * (abs(E) + fnorm * fnorm):
                    break
                alpha *= 0.5
            else:
                raise SolverError("line search failed", rnorm / fnorm, it)
            if tv:
                dxi = self.grad(self.J(dv))
                dp = ((dxi - chi * dual * np.sum(n * dxi, axis=0)) / mm
                      + xi / mm - dual)
                dual = dual + alpha * dp
                dual /= np.maximum(1.0, _norm0(dual))
            v = v + alpha * dv
            E = En
        raise SolverError("Newton iteration did not converge", rnorm / fnorm,
                          maxiter)


@lru_cache(maxsize=16)
def _model(params):
    return _Model(params)


def _check_stability(params):
    if params.fields:
        s = stability_number(params.fields, params.dt)
        if s > 1.0:
            raise StabilityError(
                f"dt = {params.dt} too large for the explicit noise term: "
                f"dt * max|b|^2 k^2 = {s:.3g} > 1")


def _step_flat(model, u, dW, state=None):
    """One step on flat arrays; ``state`` carries the TV dual variable."""
    p = model.params
    if p.integrator == ITO_EULER:
        f = u + model.noise(u, dW)
    else:
        pred = u + model.noise(u, dW)
        f = u + 0.5 * (model.noise(u, dW) + model.noise(pred, dW))
    if not p.drift:
        return model.solve_lin(f, u)
    if p.drift_scheme == EXPLICIT:
        return model.solve_lin(f + p.dt * model.drift(u), u)
    state = {} if state is None else state
    v, state["dual"] = model.solve_implicit(f, u, state.get("dual"))
    return v


def step(u, dW, params):
    """Advance one field by one step with Brownian increments ``dW``."""
    _check_stability(params)
    u = np.asarray(u, dtype=np.float64)
    if u.shape != params.grid.shape:
        raise ValueError(f"state shape {u.shape} does not match grid "
                         f"{params.grid.shape}")
    if not np.all(np.isfinite(u)):
        raise ValueError("state is not finite")
    dW = np.asarray(dW, dtype=np.float64).reshape(-1)
    if dW.size != len(params.fields):
        raise ValueError(f"expected {len(params.fields)} increments, "
                         f"got {dW.size}")
    out = _step_flat(_model(params), u.ravel().copy(), dW)
    return out.reshape(params.grid.shape)


def iterate(x0, params, path):
    """Yield ``(k, t_k, X_k)`` for ``k = 0..n`` (flat arrays, not copies)."""
    _check_stability(params)
    g = params.grid
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != g.shape:
        raise ValueError(f"x0 shape {x0.shape} does not match grid {g.shape}")
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 is not finite")
    if path.n_fields != len(params.fields):
        raise ValueError(f"path has {path.n_fields} components, "
                         f"params have {len(params.fields)} fields")
    if path.steps != params.steps or path.dt != params.dt:
        raise ValueError("Brownian path does not match the step grid")
    model = _model(params)
    u = x0.ravel().copy()
    state = {}
    yield 0, 0.0, u
    for k in range(params.steps):
        try:
            u = _step_flat(model, u, path.increments[k], state)
        except (SolverError, FloatingPointError, ValueError) as exc:
            raise StepError(k + 1, exc) from exc
        if not np.all(np.isfinite(u)):
            raise StepError(k + 1, "state became non-finite")
        yield k + 1, (k + 1) * params.dt, u


# --------------------------------------------------------------------------
# diagnostics and trajectories

COLUMNS = ("step", "time", "mass", "l2_sq", "grad_l2_sq", "phi", "phi_lambda")


@dataclass(eq=False)
class DiagnosticsRecord:
    """Per-step diagnostics, one array per column of :data:`COLUMNS`."""

    step: np.ndarray
    time: np.ndarray
    mass: np.ndarray
    l2_sq: np.ndarray
    grad_l2_sq: np.ndarray
    phi: np.ndarray
    phi_lambda: np.ndarray

    def __len__(self):
        return len(self.step)

    def column(self, name):
        return getattr(self, name)

    def rows(self):
        return zip(*(self.column(c) for c in COLUMNS))


def _diag_row(u, grid, kind, mkind, w, G):
    xi = np.stack([M @ u for M in G])
    s = _norm0(xi)
    if kind.kind == "tv":
        phi = np.dot(w, s)
    else:
        phi = np.dot(w, s ** kind.p / kind.p)
    return (float(np.dot(w, u)), float(np.dot(w, u * u)),
            float(np.dot(w, s * s)), float(phi),
            float(np.dot(w, moreau_density(s, mkind.lam, mkind.p))))


class _Recorder:
    def __init__(self, params):
        self.params = params
        st = stencil(params.grid)
        self.w, self.G = st.weights, st.grads
        self.kind, self.mkind = params.energy, params.moreau_energy
        self.rows = []

    def add(self, u):
        self.rows.append(_diag_row(u, self.params.grid, self.kind, self.mkind,
                                   self.w, self.G))

    def record(self):
        a = np.array(self.rows, dtype=np.float64).reshape(-1, 5)
        n = len(a)
        return DiagnosticsRecord(np.arange(n), np.arange(n) * self.params.dt,
                                 *(a[:, c].copy() for c in range(5)))


@dataclass(eq=False)
class Trajectory:
    times: np.ndarray
    steps: np.ndarray
    snapshots: np.ndarray      # (n_snapshots, *grid.shape)
    diagnostics: DiagnosticsRecord
    grid: object = None


def snapshot_steps(n, stride):
    """Steps ``0, stride, 2 stride, ...`` plus the final step."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ks = list(range(0, n + 1, stride))
    if ks[-1] != n:
        ks.append(n)
    return ks


def simulate(x0, params, seed=0, stride=1, path=None):
    """Integrate one path.  ``path`` overrides the path derived from ``seed``."""
    if path is None:
        path = brownian_path(seed, len(params.fields), params.T, params.dt)
    keep = set(snapshot_steps(params.steps, stride))
    rec = _Recorder(params)
    snaps, ks = [], []
    for k, _, u in iterate(x0, params, path):
        rec.add(u)
        if k in keep:
            snaps.append(u.reshape(params.grid.shape).copy())
            ks.append(k)
    ks = np.array(ks)
    return Trajectory(ks * params.dt, ks, np.array(snaps), rec.record(),
                      params.grid)


def deterministic_flow(x0, params, stride=1):
    """The noise-free flow; ``params`` must carry no noise fields."""
    if params.fields:
        raise ValueError("deterministic_flow requires an empty noise list")
    return simulate(x0, params, seed=0, stride=stride)


# --------------------------------------------------------------------------
# ensembles


@dataclass(eq=False)
class PathSummary:
    index: int
    final_l2_sq: float
    final_grad_l2_sq: float
    max_mass_drift: float
    max_l2_sq: float
    max_diff_sq: float | None = None


@dataclass(eq=False)
class EnsembleResult:
    """Monte-Carlo means over paths (index order is the summation order).

    ``diff_sq`` is ``E ||X_t - Y_t||^2`` per step when a paired initial
    condition was given; ``paired`` holds the mean diagnostics of ``Y``.
    """

    mean: DiagnosticsRecord
    paths: list
    n_paths: int
    diff_sq: np.ndarray | None = None
    paired: DiagnosticsRecord | None = None
    per_path: dict | None = None


def ensemble_path(params, base_seed, index, refine=1):
    """Driver of ensemble member ``index``: generated on the step ``dt /
    refine`` and coarsened, so runs with ``dt`` and ``dt / refine`` see the
    same Brownian motion."""
    fine = brownian_path(base_seed, len(params.fields), params.T,
                         params.dt / refine, index)
    return fine if refine == 1 else coarsen(fine, refine)


def _run_path(x0, y0, params, base_seed, index, refine):
    path = ensemble_path(params, base_seed, index, refine)
    rx = _Recorder(params)
    w = stencil(params.grid).weights
    if y0 is None:
        for _, _, u in iterate(x0, params, path):
            rx.add(u)
        return rx.record(), None, None
    ry = _Recorder(params)
    diff = []
    for (_, _, u), (_, _, v) in zip(iterate(x0, params, path),
                                    iterate(y0, params, path)):
        rx.add(u)
        ry.add(v)
        e = u - v
        diff.append(float(np.dot(w, e * e)))
    return rx.record(), ry.record(), np.array(diff)


def _run_chunk(args):
    x0, y0, params, base_seed, indices, refine = args
    return [_run_path(x0, y0, params, base_seed, k, refine) for k in indices]


def _mean_record(records):
    cols = {}
    for c in COLUMNS[2:]:
        cols[c] = np.mean(np.stack([r.column(c) for r in records]), axis=0)
    r0 = records[0]
    return DiagnosticsRecord(r0.step.copy(), r0.time.copy(), **cols)


def ensemble(x0, params, n_paths, base_seed, y0=None, workers=1, refine=1):
    """Run ``n_paths`` independent paths, path ``k`` driven by
    ``ensemble_path(params, base_seed, k, refine)``.

    Results do not depend on ``workers``: paths are assigned to contiguous
    chunks and reassembled in index order before any reduction.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    _check_stability(params)
    workers = max(1, min(int(workers), n_paths, os.cpu_count() or 1))
    chunks = [c.tolist() for c in np.array_split(np.arange(n_paths), workers)]
    tasks = [(x0, y0, params, base_seed, c, refine) for c in chunks]
    if workers == 1:
        results = [r for t in tasks for r in _run_chunk(t)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = [r for part in pool.map(_run_chunk, tasks) for r in part]
    xs = [r[0] for r in results]
    summaries = []
    for k, (rx, _, d) in enumerate(results):
        summaries.append(PathSummary(
            k, float(rx.l2_sq[-1]), float(rx.grad_l2_sq[-1]),
            float(np.max(np.abs(rx.mass - rx.mass[0]))),
            float(np.max(rx.l2_sq)),
            None if d is None else float(np.max(d))))
    out = EnsembleResult(_mean_record(xs), summaries, n_paths)
    out.per_path = {"mass": np.stack([r.mass for r in xs]),
                    "grad_l2_sq": np.stack([r.grad_l2_sq for r in xs]),
                    "l2_sq": np.stack([r.l2_sq for r in xs])}
    if y0 is not None:
        out.paired = _mean_record([r[1] for r in results])
        diffs = np.stack([r[2] for r in results])
        out.diff_sq = np.mean(diffs, axis=0)
        out.per_path["diff_sq"] = diffs
    return out
