"""Discrete domains: a staggered polar disk and a periodic torus.

Nodes are stored as arrays of shape ``grid.shape`` and flattened in C
(lexicographic) order wherever a linear ordering is needed.  Disk arrays are
indexed ``[j, k]`` with radius ``r_j = (j + 1/2) dr`` and angle ``theta_k = k
dtheta``; torus arrays are indexed by axis, ``xi_a = i_a h_a``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DISK = "disk"
TORUS = "torus"


class GridError(ValueError):
    pass


def _frozen(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Grid:
    """An immutable discrete domain.

    ``coords`` holds Cartesian node coordinates with shape ``(d, *shape)``.
    ``normals`` is zero away from the boundary.  On the disk, vector-valued
    samples (gradients, coefficient fields seen by the operators) are stored
    in the local polar frame ``(e_r, e_theta)``; on the torus in the
    Cartesian frame.
    """

    kind: str
    shape: tuple
    spacing: tuple
    coords: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    boundary: np.ndarray = field(repr=False)
    normals: np.ndarray = field(repr=False)
    radius: float | None = None
    lengths: tuple | None = None

    @property
    def dim(self):
        return self.coords.shape[0]

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def measure(self):
        if self.kind == DISK:
            return math.pi * self.radius**2
        return float(np.prod(self.lengths))

    @property
    def r(self):
        """Radial node positions (disk only)."""
        n_r = self.shape[0]
        return (np.arange(n_r) + 0.5) * self.spacing[0]

    @property
    def theta(self):
        """Angular node positions (disk only)."""
        return np.arange(self.shape[1]) * self.spacing[1]

    def descriptor(self):
        """JSON-serializable description sufficient to rebuild the grid."""
        if self.kind == DISK:
            return {"kind": DISK, "radius": self.radius,
                    "n_r": self.shape[0], "n_theta": self.shape[1]}
        return {"kind": TORUS, "cells": list(self.shape),
                "lengths": list(self.lengths)}


def build_polar_disk(R, n_r, n_theta):
    if not R > 0:
        raise GridError(f"radius must be positive, got {R}")
    if n_r < 4:
        raise GridError(f"n_r must be >= 4, got {n_r}")
    if n_theta < 8:
        raise GridError(f"n_theta must be >= 8, got {n_theta}")
    if n_theta % 2:
        raise GridError(f"n_theta must be even, got {n_theta}")
    R = float(R)
    dr = R / n_r
    dth = 2.0 * math.pi / n_theta
    r = (np.arange(n_r) + 0.5) * dr
    th = np.arange(n_theta) * dth
    rr, tt = np.meshgrid(r, th, indexing="ij")
    coords = np.stack([rr * np.cos(tt), rr * np.sin(tt)])
    weights = rr * dr * dth
    boundary = np.zeros((n_r, n_theta), dtype=bool)
    boundary[-1, :] = True
    normals = np.zeros_like(coords)
    normals[0, -1] = np.cos(th)
    normals[1, -1] = np.sin(th)
    boundary.setflags(write=False)
    return Grid(DISK, (n_r, n_theta), (dr, dth), _frozen(coords),
                _frozen(weights), boundary, _frozen(normals), radius=R)


def build_torus(d, cells, lengths):
    if d not in (2, 3):
        raise GridError(f"torus dimension must be 2 or 3, got {d}")
    cells = tuple(int(c) for c in cells)
    lengths = tuple(float(L) for L in lengths)
    if len(cells) != d or len(lengths) != d:
        raise GridError("cells and lengths must have one entry per axis")
    if min(cells) < 4:
        raise GridError(f"need at least 4 cells per axis, got {cells}")
    if min(lengths) <= 0:
        raise GridError(f"side lengths must be positive, got {lengths}")
    h = tuple(L / n for L, n in zip(lengths, cells))
    axes = [np.arange(n) * hh for n, hh in zip(cells, h)]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    weights = np.full(cells, float(np.prod(h)))
    boundary = np.zeros(cells, dtype=bool)
    boundary.setflags(write=False)
    return Grid(TORUS, cells, h, _frozen(coords), _frozen(weights), boundary,
                _frozen(np.zeros_like(coords)), lengths=lengths)


def grid_from_descriptor(desc):
    if desc["kind"] == DISK:
        return build_polar_disk(desc["radius"], desc["n_r"], desc["n_theta"])
    if desc["kind"] == TORUS:
        return build_torus(len(desc["cells"]), desc["cells"], desc["lengths"])
    raise GridError(f"unknown grid kind {desc['kind']!r}")


def inner_product(u, v, grid):
    """Weighted L2 inner product; the sum runs over nodes in C order."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != grid.shape or v.shape != grid.shape:
        raise GridError(
            f"field shapes {u.shape}, {v.shape} do not match grid {grid.shape}")
    return float(np.sum(grid.weights * (u * v)))


def norm(u, grid):
    return math.sqrt(inner_product(u, u, grid))
