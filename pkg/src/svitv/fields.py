"""Noise coefficient fields and checks of their structural conditions.

Four conditions are checked for a family ``b_1, ..., b_N``:

* ``tangency``      -- ``<b_i, nu> = 0`` on the boundary;
* ``commutation``   -- ``(Db_l) b_i - (Db_i) b_l = 0`` for ``i != l``;
* ``divergence`` and ``laplace_dot`` -- ``div b_i = 0`` and
  ``<Lap b_i, b_i> = 0``;
* ``boundary_killing`` -- ``b^T (Db + Db^T) nu = 0`` on the boundary.

Jacobians are stored with ``J[..., i, j] = d_j b^i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import DISK, TORUS, Grid


class FieldError(ValueError):
    pass


# --------------------------------------------------------------------------
# specifications


@dataclass(frozen=True)
class Rotation2D:
    """``b(xi) = (xi_2, -xi_1)``, the generator of planar rotations."""

    dim = 2


@dataclass(frozen=True)
class Cross3D:
    """``b(xi) = axis x xi``; for ``axis = (1, 1, 1)`` this is
    ``(xi_3 - xi_2, xi_1 - xi_3, xi_2 - xi_1)``."""

    axis: tuple = (1.0, 1.0, 1.0)
    dim = 3

    def __post_init__(self):
        if len(self.axis) != 3 or not any(float(a) != 0.0 for a in self.axis):
            raise FieldError("Cross3D axis must be a nonzero 3-vector")


@dataclass(frozen=True)
class Constant:
    vector: tuple

    @property
    def dim(self):
        return len(self.vector)


@dataclass(frozen=True)
class Linear:
    """Affine field ``b(xi) = A xi + c``."""

    matrix: tuple
    offset: tuple | None = None

    @property
    def dim(self):
        return len(self.matrix)


@dataclass(frozen=True, eq=False)
class Table:
    """Cartesian components sampled at the nodes of ``grid``; derivatives
    come from centered differences of the given order."""

    values: np.ndarray
    grid: Grid
    order: int = 2

    def __post_init__(self):
        if self.order not in (2, 4):
            raise FieldError(f"derivative order must be 2 or 4, got {self.order}")
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.grid.dim, *self.grid.shape):
            raise FieldError(f"table shape {v.shape} does not match grid")
        if not np.all(np.isfinite(v)):
            raise FieldError("table values must be finite")

    @property
    def dim(self):
        return self.grid.dim


def _analytic_matrix(spec):
    """Return ``(A, c)`` with ``b(xi) = A xi + c`` for analytic specs."""
    if isinstance(spec, Rotation2D):
        return np.array([[0.0, 1.0], [-1.0, 0.0]]), np.zeros(2)
    if isinstance(spec, Cross3D):
        z1, z2, z3 = (float(a) for a in spec.axis)
        A = np.array([[0.0, -z3, z2], [z3, 0.0, -z1], [-z2, z1, 0.0]])
        return A, np.zeros(3)
    if isinstance(spec, Constant):
        c = np.asarray(spec.vector, dtype=np.float64)
        return np.zeros((c.size, c.size)), c
    if isinstance(spec, Linear):
        A = np.asarray(spec.matrix, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise FieldError("Linear field needs a square matrix")
        c = (np.zeros(A.shape[0]) if spec.offset is None
             else np.asarray(spec.offset, dtype=np.float64))
        return A, c
    raise FieldError(f"not an analytic field spec: {spec!r}")


# --------------------------------------------------------------------------
# table derivatives


def _centered(f, axis, h, order, wrap=True):
    roll = np.roll
    if order == 2:
        d1 = (roll(f, -1, axis) - roll(f, 1, axis)) / (2 * h)
        d2 = (roll(f, -1, axis) - 2 * f + roll(f, 1, axis)) / h**2
    else:
        fp1, fm1 = roll(f, -1, axis), roll(f, 1, axis)
        fp2, fm2 = roll(f, -2, axis), roll(f, 2, axis)
        d1 = (-fp2 + 8 * fp1 - 8 * fm1 + fm2) / (12 * h)
        d2 = (-fp2 + 16 * fp1 - 30 * f + 16 * fm1 - fm2) / (12 * h**2)
    return d1, d2


def _radial_derivs(f, dr, order):
    """Radial derivatives on the staggered disk: cross-pole ghosts at the
    center, one-sided closures at the outer ring."""
    n_r, n_t = f.shape
    opposite = np.roll(f, -n_t // 2, axis=1)
    ext = np.concatenate([opposite[1::-1], f], axis=0)  # ghosts j=-2, -1
    g = 2
    d1 = np.empty_like(f)
    d2 = np.empty_like(f)
    last_centered = n_r - 2 if order == 2 else n_r - 3
    for j in range(0, last_centered + 1):
        e = j + g
        if order == 2:
            d1[j] = (ext[e + 1] - ext[e - 1]) / (2 * dr)
            d2[j] = (ext[e + 1] - 2 * ext[e] + ext[e - 1]) / dr**2
        else:
            d1[j] = (-ext[e + 2] + 8 * ext[e + 1] - 8 * ext[e - 1]
                     + ext[e - 2]) / (12 * dr)
            d2[j] = (-ext[e + 2] + 16 * ext[e + 1] - 30 * ext[e]
                     + 16 * ext[e - 1] - ext[e - 2]) / (12 * dr**2)
    if order == 4:
        j = n_r - 2
        d1[j] = (f[j + 1] - f[j - 1]) / (2 * dr)
        d2[j] = (f[j + 1] - 2 * f[j] + f[j - 1]) / dr**2
    j = n_r - 1
    d1[j] = (3 * f[j] - 4 * f[j - 1] + f[j - 2]) / (2 * dr)
    d2[j] = (2 * f[j] - 5 * f[j - 1] + 4 * f[j - 2] - f[j - 3]) / dr**2
    return d1, d2


def _table_derivatives(spec):
    """Jacobian ``(d, d, *shape)`` and componentwise Laplacian ``(d, *shape)``."""
    grid, v, order = spec.grid, np.asarray(spec.values, float), spec.order
    d = grid.dim
    jac = np.empty((d, d, *grid.shape))
    lap = np.empty((d, *grid.shape))
    if grid.kind == TORUS:
        for i in range(d):
            lap[i] = 0.0
            for a in range(d):
                d1, d2 = _centered(v[i], a, grid.spacing[a], order)
                jac[i, a] = d1
                lap[i] += d2
        return jac, lap
    dr, dth = grid.spacing
    r = grid.r[:, None]
    th = grid.theta[None, :]
    c, s = np.cos(th), np.sin(th)
    for i in range(d):
        f_r, f_rr = _radial_derivs(v[i], dr, order)
        f_t, f_tt = _centered(v[i], 1, dth, order)
        jac[i, 0] = c * f_r - s * f_t / r
        jac[i, 1] = s * f_r + c * f_t / r
        lap[i] = f_rr + f_r / r + f_tt / r**2
    return jac, lap


# --------------------------------------------------------------------------
# sampled fields


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """A coefficient field sampled on a grid.

    ``values`` are Cartesian components at the nodes, shape ``(d, *shape)``;
    ``frame`` are the components the discrete operators use (polar on the
    disk, Cartesian on the torus).
    """

    spec: object
    grid: Grid
    values: np.ndarray = field(repr=False)
    frame: np.ndarray = field(repr=False)

    @property
    def analytic(self):
        return not isinstance(self.spec, Table)

    def evaluate(self, points):
        """Values, Jacobians and componentwise Laplacians at ``points``
        (shape ``(n, d)``).  Analytic specs only."""
        A, c = _analytic_matrix(self.spec)
        pts = np.asarray(points, dtype=np.float64)
        b = pts @ A.T + c
        jac = np.broadcast_to(A, (len(pts), *A.shape))
        return b, jac, np.zeros_like(b)

    def node_data(self):
        """Values, Jacobians and Laplacians at every node, flattened to
        ``(n, d)``, ``(n, d, d)``, ``(n, d)``."""
        d = self.grid.dim
        if self.analytic:
            return self.evaluate(self.grid.coords.reshape(d, -1).T)
        jac, lap = _table_derivatives(self.spec)
        n = self.grid.size
        return (self.values.reshape(d, n).T,
                np.moveaxis(jac.reshape(d, d, n), -1, 0),
                lap.reshape(d, n).T)


def _periodic(spec):
    if isinstance(spec, (Constant, Table)):
        return True
    if isinstance(spec, Linear):
        return not np.any(np.asarray(spec.matrix, dtype=float))
    return False


def analytic_field(spec):
    """A grid-free field for checks on sample sets (e.g. :func:`ball_samples`)."""
    if isinstance(spec, Table):
        raise FieldError("table fields need a grid")
    return CoefficientField(spec, None, None, None)


def make_field(spec, grid):
    d = grid.dim
    if spec.dim != d:
        raise FieldError(
            f"field/domain mismatch: {type(spec).__name__} is {spec.dim}-D, "
            f"grid is {d}-D")
    if grid.kind != DISK and not _periodic(spec):
        raise FieldError(
            f"field/domain mismatch: {type(spec).__name__} is not periodic "
            "and cannot live on the torus")
    if isinstance(spec, Table):
        if spec.grid is not grid:
            raise FieldError("table field sampled on a different grid")
        values = np.array(spec.values, dtype=np.float64)
    else:
        A, c = _analytic_matrix(spec)
        pts = grid.coords.reshape(d, -1).T
        values = (pts @ A.T + c).T.reshape(d, *grid.shape)
    if grid.kind == DISK:
        th = grid.theta[None, :]
        cos, sin = np.cos(th), np.sin(th)
        if isinstance(spec, Rotation2D):
            # exactly b = -r e_theta
            frame = np.stack([np.zeros(grid.shape),
                              -np.broadcast_to(grid.r[:, None], grid.shape)])
        else:
            frame = np.stack([values[0] * cos + values[1] * sin,
                              -values[0] * sin + values[1] * cos])
    else:
        frame = values.copy()
    values.setflags(write=False)
    frame = np.ascontiguousarray(frame)
    frame.setflags(write=False)
    return CoefficientField(spec, grid, values, frame)


# --------------------------------------------------------------------------
# sample sets


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Points where pointwise conditions are checked.

    ``node_index`` (flat grid indices) is required for table fields, which
    only know their derivatives at nodes.  ``normals`` is set for boundary
    sets.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    node_index: np.ndarray | None = None


def grid_samples(grid, analytic=True):
    """Interior and boundary sample sets for a grid.

    On the disk the analytic boundary set lies on the circle ``r = R`` at
    the grid angles; for tables it is the outermost node ring.
    """
    d = grid.dim
    nodes = grid.coords.reshape(d, -1).T
    interior = SampleSet(nodes, node_index=np.arange(grid.size))
    if grid.kind == TORUS:
        empty = np.zeros((0, d))
        return interior, SampleSet(empty, empty, np.zeros(0, dtype=int))
    th = grid.theta
    nu = np.stack([np.cos(th), np.sin(th)], axis=1)
    ring = np.ravel_multi_index(
        (np.full(th.size, grid.shape[0] - 1), np.arange(th.size)), grid.shape)
    if analytic:
        return interior, SampleSet(grid.radius * nu, nu, ring)
    return interior, SampleSet(nodes[ring], nu, ring)


def ball_samples(R=1.0, n=9, n_surface=200):
    """Interior lattice points and a Fibonacci sphere for the ball
    ``|xi| < R`` in three dimensions (analytic fields only)."""
    ax = np.linspace(-R, R, n + 2)[1:-1]
    pts = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
    pts = pts[np.linalg.norm(pts, axis=1) < R]
    i = np.arange(n_surface) + 0.5
    z = 1.0 - 2.0 * i / n_surface
    phi = math.pi * (1.0 + math.sqrt(5.0)) * i
    rho = np.sqrt(1.0 - z * z)
    nu = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    return SampleSet(pts), SampleSet(R * nu, nu)


def _data_at(b, samples):
    if b.analytic:
        return b.evaluate(samples.points)
    if samples.node_index is None:
        raise FieldError("table fields can only be checked at grid nodes")
    vals, jac, lap = b.node_data()
    idx = samples.node_index
    return vals[idx], jac[idx], lap[idx]


def _argmax(values, points):
    if values.size == 0:
        return 0.0, None
    k = int(np.argmax(values))
    return float(values[k]), tuple(float(x) for x in points[k])


# --------------------------------------------------------------------------
# residuals


def killing_residual(b, samples):
    """``max |d_j b^i + d_i b^j|`` over the sample points and index pairs."""
    _, jac, _ = _data_at(b, samples)
    if len(jac) == 0:
        return 0.0
    return float(np.max(np.abs(jac + np.swapaxes(jac, -1, -2))))


def commutator_residual(bi, bl, samples):
    """``max_j |sum_k b_i^k d_k b_l^j - b_l^k d_k b_i^j|``."""
    if bi is bl:
        raise FieldError("commutator needs two distinct fields")
    vi, ji, _ = _data_at(bi, samples)
    vl, jl, _ = _data_at(bl, samples)
    res = np.einsum("njk,nk->nj", jl, vi) - np.einsum("njk,nk->nj", ji, vl)
    return float(np.max(np.abs(res))) if len(res) else 0.0


@dataclass
class Condition:
    name: str
    residual: float
    location: tuple | None
    skipped: bool = False


@dataclass
class AssumptionReport:
    conditions: list
    tol: float

    @property
    def passed(self):
        return all(c.skipped or c.residual <= self.tol for c in self.conditions)

    def table(self):
        lines = [f"{'condition':<24}{'field':>8}{'residual':>14}  "
                 f"{'status':<8}location"]
        for c in self.conditions:
            name, _, which = c.name.partition("@")
            if c.skipped:
                status = "skipped"
            else:
                status = "ok" if c.residual <= self.tol else "FAIL"
            loc = "-" if c.location is None else "(" + ", ".join(
                f"{x:.6g}" for x in c.location) + ")"
            lines.append(f"{name:<24}{which or '-':>8}{c.residual:>14.6e}  "
                         f"{status:<8}{loc}")
        lines.append(f"tolerance {self.tol:.3e}: "
                     + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines)


def default_tolerance(fields):
    if all(b.analytic for b in fields):
        return 1e-8
    g = fields[0].grid
    if g.kind == DISK:
        h = max(g.spacing[0], g.radius * g.spacing[1])
    else:
        h = max(g.spacing)
    return 10.0 * h**2


def validate_assumption(fields, where, tol=None):
    """Check the four structural conditions on a grid or on a pair of
    ``(interior, boundary)`` sample sets."""
    fields = list(fields)
    if not fields:
        raise FieldError("need at least one coefficient field")
    tol = default_tolerance(fields) if tol is None else tol
    conds = []
    for i, b in enumerate(fields):
        if isinstance(where, Grid):
            interior, bdry = grid_samples(where, b.analytic)
        else:
            interior, bdry = where
        tag = f"@b{i + 1}"

        vals, jac, _ = _data_at(b, bdry)
        if len(vals):
            tang = np.abs(np.einsum("nd,nd->n", vals, bdry.normals))
            sym = jac + np.swapaxes(jac, -1, -2)
            bk = np.abs(np.einsum("ni,nij,nj->n", vals, sym, bdry.normals))
        else:
            tang = bk = np.zeros(0)
        conds.append(Condition("tangency" + tag, *_argmax(tang, bdry.points)))

        div_res, lap_res, pts = [], [], []
        for s in (interior, bdry):
            v, jj, lap = _data_at(b, s)
            div_res.append(np.abs(np.trace(jj, axis1=-2, axis2=-1)))
            lap_res.append(np.abs(np.einsum("nd,nd->n", lap, v)))
            pts.append(s.points)
        pts = np.concatenate(pts)
        conds.append(Condition("divergence" + tag,
                               *_argmax(np.concatenate(div_res), pts)))
        conds.append(Condition("laplace_dot" + tag,
                               *_argmax(np.concatenate(lap_res), pts)))
        conds.append(Condition("boundary_killing" + tag,
                               *_argmax(bk, bdry.points)))

    if len(fields) == 1:
        conds.append(Condition("commutation", 0.0, None, skipped=True))
    else:
        for i in range(len(fields)):
            for l in range(i + 1, len(fields)):
                if isinstance(where, Grid):
                    interior, _ = grid_samples(where, fields[i].analytic
                                               and fields[l].analytic)
                else:
                    interior = where[0]
                vi, ji, _ = _data_at(fields[i], interior)
                vl, jl, _ = _data_at(fields[l], interior)
                res = np.abs(np.einsum("njk,nk->nj", jl, vi)
                             - np.einsum("njk,nk->nj", ji, vl)).max(axis=1)
                conds.append(Condition(f"commutation@b{i + 1}b{l + 1}",
                                       *_argmax(res, interior.points)))
    return AssumptionReport(conds, tol)


@dataclass
class KillingIntegrals:
    """``int |sym Db|^2 / 2`` computed directly and through the divergence
    identity ``div V = <Lap b, b> + |sym Db|^2 / 2 - (div b)^2`` with
    ``V_j = sum_i (d_j b^i + d_i b^j) b^i - b^j div b``."""

    direct: float
    via_boundary: float

    @property
    def mismatch(self):
        return abs(self.direct - self.via_boundary)


def killing_equivalence_check(b, grid):
    if grid.kind != DISK:
        raise FieldError("the boundary identity needs the disk")
    w = grid.weights.ravel()
    vals, jac, lap = b.node_data()
    sym = jac + np.swapaxes(jac, -1, -2)
    direct = float(np.sum(w * 0.5 * np.sum(sym**2, axis=(1, 2))))
    div = np.trace(jac, axis1=1, axis2=2)
    volume = float(np.sum(w * (div**2 - np.einsum("nd,nd->n", lap, vals))))

    _, bdry = grid_samples(grid, b.analytic)
    bv, bj, _ = _data_at(b, bdry)
    bsym = bj + np.swapaxes(bj, -1, -2)
    bdiv = np.trace(bj, axis1=1, axis2=2)
    V = np.einsum("nij,ni->nj", bsym, bv) - bv * bdiv[:, None]
    radius = grid.radius if b.analytic else grid.r[-1]
    dS = radius * grid.spacing[1]
    surface = float(np.sum(dS * np.einsum("nd,nd->n", V, bdry.normals)))
    return KillingIntegrals(direct, surface + volume)
