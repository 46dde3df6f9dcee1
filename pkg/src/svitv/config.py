"""Experiment configuration.

A configuration is plain text with one statement per line::

    # comment
    section.key = value            # trailing comments are allowed

Keys are dotted names (``[A-Za-z_][A-Za-z0-9_]*`` segments); a value is a
comma-separated list of items (numbers, ``true``/``false`` or bare words).
Each key may appear once.  Recognized keys, with defaults::

    mode               validate | simulate | denoise | svi-check | sweep
    domain.kind        torus | disk                               (required)
    domain.cells       torus cells per axis, 2 or 3 entries
    domain.lengths     torus side lengths                  (1 per axis)
    domain.radius      disk radius                                 (1)
    domain.n_r         disk rings
    domain.n_theta     disk nodes per ring
    field.<i>.kind     rotation2d | cross3d | constant | linear | table
    field.<i>.vector   constant field value
    field.<i>.axis     cross3d axis                            (1, 1, 1)
    field.<i>.matrix   linear field matrix, row-major
    field.<i>.offset   linear field offset                         (0)
    field.<i>.components  table field: one SVIF file per component
    field.<i>.order    table derivative order, 2 or 4              (2)
    solver.eps         viscosity                                   (0)
    solver.lambda      Yosida parameter                         (0.01)
    solver.delta       resolvent parameter                         (0)
    solver.p           drift exponent in [1, 2)                    (1)
    solver.T           horizon                                     (1)
    solver.dt          step                                     (0.01)
    solver.integrator  ito-euler | stratonovich-heun       (ito-euler)
    solver.drift       true | false                             (true)
    solver.drift_scheme  implicit | explicit                 (implicit)
    solver.ito_only    drop the 1/2 sum B^2 correction         (false)
    solver.solver_tol  nonlinear and linear solver tolerance   (1e-12)
    ensemble.n_paths   (1)      ensemble.base_seed (0)
    ensemble.stride    snapshot stride (1)
    ensemble.workers   worker processes (1)
    output.dir         output directory                          (out)
    output.formats     subset of svif, csv                  (svif, csv)
    initial.kind       gaussian | indicator | constant | file | image
    initial.center     (domain centre)   initial.width (0.05)
    initial.amplitude  (1)   initial.offset (0)   initial.radius (0.25)
    initial.value      constant value (0)
    initial.file       SVIF file         initial.image  PGM file
    svi.test           constant | regularized               (constant)
    svi.value          constant test process value   (mean of x0)
    svi.z0.*           initial datum of the regularized test process,
                       same keys as initial.*; defaults to x0
    svi.eps, svi.lambda   test process parameters (solver values)
    sweep.entry.<i>    eps, lambda, delta of one ladder entry
    sweep.reference    entry used as reference for the fits     (last)
    denoise.bits       8 | 16                                      (8)
    denoise.output     output image name               (denoised.pgm)

Relative file names are resolved against the configuration's directory.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import numpy as np

from .fields import (Constant, Cross3D, FieldError, Linear, Rotation2D, Table,
                     make_field, validate_assumption)
from .geometry import DISK, TORUS, GridError, build_polar_disk, build_torus
from .sde import EXPLICIT, IMPLICIT, ITO_EULER, STRATONOVICH_HEUN, SolverParams

MODES = ("validate", "simulate", "denoise", "svi-check", "sweep")


class ConfigError(ValueError):
    """Carries every violation found, not just the first."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


# --------------------------------------------------------------------------
# lexical layer

_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*(\.[A-Za-z0-9_]+)*$")


def tokenize(text):
    """``{key: (line_number, [items])}``; raises on syntax errors."""
    entries, errors = {}, []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key = key.strip()
        if not eq:
            errors.append(f"line {n}: expected 'key = value'")
            continue
        if not _KEY.match(key):
            errors.append(f"line {n}: invalid key {key!r}")
            continue
        items = [v.strip() for v in value.split(",")]
        if not value.strip() or any(not v for v in items):
            errors.append(f"line {n}: empty value for {key!r}")
            continue
        if key in entries:
            errors.append(f"line {n}: duplicate key {key!r} (first on line "
                          f"{entries[key][0]})")
            continue
        entries[key] = (n, items)
    if errors:
        raise ConfigError([f"syntax error: {e}" for e in errors])
    return entries


# --------------------------------------------------------------------------
# typed access


class _Reader:
    def __init__(self, entries, base_dir):
        self.entries = entries
        self.base_dir = base_dir
        self.used = set()
        self.errors = []

    def has(self, key):
        return key in self.entries

    def _items(self, key):
        self.used.add(key)
        return self.entries[key][1]

    def _fail(self, key, msg):
        line = self.entries[key][0] if key in self.entries else None
        where = f" (line {line})" if line else ""
        self.errors.append(f"{key}{where}: {msg}")

    def floats(self, key, default=None, count=None):
        if key not in self.entries:
            return default
        try:
            vals = [float(v) for v in self._items(key)]
        except ValueError:
            self._fail(key, "expected numbers")
            return default
        if count is not None and len(vals) != count:
            self._fail(key, f"expected {count} values, got {len(vals)}")
            return default
        if not all(np.isfinite(vals)):
            self._fail(key, "values must be finite")
            return default
        return vals

    def float(self, key, default=None):
        vals = self.floats(key, None, 1)
        return default if vals is None else vals[0]

    def ints(self, key, default=None, count=None):
        if key not in self.entries:
            return default
        try:
            vals = [int(v) for v in self._items(key)]
        except ValueError:
            self._fail(key, "expected integers")
            return default
        if count is not None and len(vals) != count:
            self._fail(key, f"expected {count} values, got {len(vals)}")
            return default
        return vals

    def int(self, key, default=None):
        vals = self.ints(key, None, 1)
        return default if vals is None else vals[0]

    def words(self, key, default=None):
        if key not in self.entries:
            return default
        return list(self._items(key))

    def choice(self, key, options, default=None):
        if key not in self.entries:
            return default
        items = self._items(key)
        if len(items) != 1 or items[0] not in options:
            self._fail(key, f"expected one of {', '.join(options)}")
            return default
        return items[0]

    def bool(self, key, default=None):
        v = self.choice(key, ("true", "false"))
        return default if v is None else v == "true"

    def path(self, key):
        vals = self.words(key)
        if vals is None:
            return None
        out = []
        for v in vals:
            p = v if os.path.isabs(v) else os.path.join(self.base_dir, v)
            if not os.path.isfile(p):
                self._fail(key, f"file not found: {v}")
            out.append(p)
        return out

    def require(self, key):
        if key not in self.entries:
            self.errors.append(f"{key}: required")
            return False
        return True


# --------------------------------------------------------------------------
# structured configuration


@dataclass(frozen=True)
class InitialSpec:
    kind: str = "gaussian"
    center: tuple | None = None
    width: float = 0.05
    amplitude: float = 1.0
    offset: float = 0.0
    radius: float = 0.25
    value: float = 0.0
    file: str | None = None
    image: str | None = None


@dataclass(eq=False)
class ExperimentConfig:
    mode: str | None
    grid: object
    field_specs: list
    fields: tuple
    params: SolverParams
    n_paths: int = 1
    base_seed: int = 0
    stride: int = 1
    workers: int = 1
    out_dir: str = "out"
    formats: tuple = ("svif", "csv")
    initial: InitialSpec = field(default_factory=InitialSpec)
    svi_test: str = "constant"
    svi_value: float | None = None
    svi_z0: InitialSpec | None = None
    svi_eps: float | None = None
    svi_lambda: float | None = None
    sweep: list = field(default_factory=list)
    sweep_reference: int | None = None
    denoise_bits: int = 8
    denoise_output: str = "denoised.pgm"
    base_dir: str = "."


_PATTERNS = [re.compile(p) for p in (
    r"mode", r"domain\.(kind|cells|lengths|radius|n_r|n_theta)",
    r"field\.\d+\.(kind|vector|axis|matrix|offset|components|order)",
    r"solver\.(eps|lambda|delta|p|T|dt|integrator|drift|drift_scheme|"
    r"ito_only|solver_tol)",
    r"ensemble\.(n_paths|base_seed|stride|workers)",
    r"output\.(dir|formats)",
    r"(initial|svi\.z0)\.(kind|center|width|amplitude|offset|radius|value|"
    r"file|image)",
    r"svi\.(test|value|eps|lambda)", r"sweep\.entry\.\d+", r"sweep\.reference",
    r"denoise\.(bits|output)")]


def _grid(r):
    kind = r.choice("domain.kind", (TORUS, DISK))
    if kind is None:
        if not r.has("domain.kind"):
            r.require("domain.kind")
        return None
    try:
        if kind == TORUS:
            if not r.require("domain.cells"):
                return None
            cells = r.ints("domain.cells")
            if cells is None:
                return None
            lengths = r.floats("domain.lengths", [1.0] * len(cells),
                               len(cells))
            return build_torus(len(cells), cells, lengths)
        ok = r.require("domain.n_r") & r.require("domain.n_theta")
        radius = r.float("domain.radius", 1.0)
        n_r, n_t = r.int("domain.n_r"), r.int("domain.n_theta")
        if not ok or n_r is None or n_t is None:
            return None
        return build_polar_disk(radius, n_r, n_t)
    except GridError as exc:
        r.errors.append(f"domain: {exc}")
        return None


def _field_specs(r, grid):
    ids = sorted({int(k.split(".")[1]) for k in r.entries
                  if k.startswith("field.")})
    specs = []
    for i in ids:
        pre = f"field.{i}."
        kind = r.choice(pre + "kind", ("rotation2d", "cross3d", "constant",
                                       "linear", "table"))
        if kind is None:
            r.require(pre + "kind")
            continue
        try:
            if kind == "rotation2d":
                specs.append(Rotation2D())
            elif kind == "cross3d":
                specs.append(Cross3D(tuple(r.floats(pre + "axis",
                                                    [1.0, 1.0, 1.0], 3))))
            elif kind == "constant":
                if r.require(pre + "vector"):
                    specs.append(Constant(tuple(r.floats(pre + "vector"))))
            elif kind == "linear":
                if r.require(pre + "matrix"):
                    m = r.floats(pre + "matrix")
                    d = int(round(len(m) ** 0.5))
                    if d * d != len(m):
                        r.errors.append(f"{pre}matrix: expected d*d entries")
                        continue
                    off = r.floats(pre + "offset", [0.0] * d, d)
                    specs.append(Linear(tuple(map(tuple, np.reshape(m, (d, d)))),
                                        tuple(off)))
            else:
                files = r.path(pre + "components") if r.require(
                    pre + "components") else None
                order = r.int(pre + "order", 2)
                if files and grid is not None and not r.errors:
                    from .io import read_snapshot
                    comps = [read_snapshot(f).values for f in files]
                    specs.append(Table(np.stack(comps), grid, order))
        except (FieldError, ValueError, TypeError) as exc:
            r.errors.append(f"field.{i}: {exc}")
    return specs


def _initial(r, prefix, default_kind):
    kind = r.choice(prefix + "kind", ("gaussian", "indicator", "constant",
                                      "file", "image", "same"), default_kind)
    spec = InitialSpec(
        kind=kind,
        center=(tuple(r.floats(prefix + "center"))
                if r.has(prefix + "center") and r.floats(prefix + "center")
                else None),
        width=r.float(prefix + "width", 0.05),
        amplitude=r.float(prefix + "amplitude", 1.0),
        offset=r.float(prefix + "offset", 0.0),
        radius=r.float(prefix + "radius", 0.25),
        value=r.float(prefix + "value", 0.0),
        file=(r.path(prefix + "file") or [None])[0],
        image=(r.path(prefix + "image") or [None])[0])
    if kind == "file" and spec.file is None:
        r.require(prefix + "file")
    if kind == "image" and spec.image is None:
        r.require(prefix + "image")
    if spec.width is not None and spec.width <= 0:
        r.errors.append(f"{prefix}width: must be positive")
    return spec


def parse_config(text, base_dir=".", mode=None):
    """Parse and validate; raises :class:`ConfigError` listing all problems.

    ``mode`` (e.g. from the command line) overrides the ``mode`` key.
    """
    entries = tokenize(text)
    r = _Reader(entries, base_dir)
    for key in entries:
        if not any(p.fullmatch(key) for p in _PATTERNS):
            r.errors.append(f"{key} (line {entries[key][0]}): unknown key")
            r.used.add(key)
    cfg_mode = r.choice("mode", MODES)
    mode = mode or cfg_mode

    grid = _grid(r)
    specs = _field_specs(r, grid)
    fields = []
    if grid is not None:
        for i, s in enumerate(specs):
            try:
                fields.append(make_field(s, grid))
            except FieldError as exc:
                r.errors.append(f"field {i + 1}: {exc}")
    if fields and len(fields) == len(specs):
        report = validate_assumption(fields, grid)
        if not report.passed and mode != "validate":
            bad = [c.name for c in report.conditions
                   if not c.skipped and c.residual > report.tol]
            r.errors.append("fields: assumption check failed ("
                            + ", ".join(bad) + ")")

    p = r.float("solver.p", 1.0)
    if p is not None and not 1 <= p < 2:
        r.errors.append("solver.p: p out of range [1,2)")
    kw = dict(
        eps=r.float("solver.eps", 0.0), lam=r.float("solver.lambda", 1e-2),
        delta=r.float("solver.delta", 0.0), p=p,
        T=r.float("solver.T", 1.0), dt=r.float("solver.dt", 1e-2),
        integrator=r.choice("solver.integrator",
                            (ITO_EULER, STRATONOVICH_HEUN), ITO_EULER),
        drift=r.bool("solver.drift", True),
        drift_scheme=r.choice("solver.drift_scheme", (IMPLICIT, EXPLICIT),
                              IMPLICIT),
        ito_only=r.bool("solver.ito_only", False),
        solver_tol=r.float("solver.solver_tol", 1e-12))
    params = None
    if grid is not None and None not in kw.values() and 1 <= p < 2 \
            and len(fields) == len(specs):
        try:
            params = SolverParams(fields=tuple(fields), grid=grid,
                                  check_fields=False, **kw)
        except ValueError as exc:
            r.errors.extend(f"solver: {e}" for e in str(exc).split("; "))
        if kw["solver_tol"] is not None and not kw["solver_tol"] > 0:
            r.errors.append("solver.solver_tol: must be positive")

    n_paths = r.int("ensemble.n_paths", 1)
    seed = r.int("ensemble.base_seed", 0)
    stride = r.int("ensemble.stride", 1)
    workers = r.int("ensemble.workers", 1)
    for key, v in (("ensemble.n_paths", n_paths), ("ensemble.stride", stride),
                   ("ensemble.workers", workers)):
        if v is not None and v < 1:
            r.errors.append(f"{key}: must be >= 1")
    if seed is not None and not 0 <= seed < 2**64:
        r.errors.append("ensemble.base_seed: must be an unsigned 64-bit "
                        "integer")
    formats = tuple(r.words("output.formats", ["svif", "csv"]))
    for f in formats:
        if f not in ("svif", "csv"):
            r.errors.append(f"output.formats: unknown format {f!r}")

    initial = _initial(r, "initial.", "gaussian")
    if initial.kind == "same":
        r.errors.append("initial.kind: 'same' is only valid for svi.z0")
    if initial.kind == "image" and grid is not None and (
            grid.kind != TORUS or grid.dim != 2):
        r.errors.append("initial.image: images need a two-dimensional torus")

    svi_test = r.choice("svi.test", ("constant", "regularized"), "constant")
    svi_z0 = _initial(r, "svi.z0.", "same")

    sweep = []
    for key in sorted((k for k in entries if k.startswith("sweep.entry.")),
                      key=lambda k: int(k.rsplit(".", 1)[1])):
        e = r.floats(key, None, 3)
        if e is not None:
            if e[0] < 0 or e[1] <= 0 or e[2] < 0:
                r.errors.append(f"{key}: need eps >= 0, lambda > 0, "
                                "delta >= 0")
            sweep.append(tuple(e))
    ref = r.int("sweep.reference")
    if ref is not None and not 1 <= ref <= len(sweep):
        r.errors.append("sweep.reference: out of range")
    bits = r.int("denoise.bits", 8)
    if bits not in (8, 16):
        r.errors.append("denoise.bits: must be 8 or 16")

    if mode == "sweep" and len(sweep) < 2:
        r.errors.append("sweep: need at least two sweep.entry lines")
    if mode == "denoise" and initial.kind != "image":
        r.errors.append("denoise: initial.kind must be image")

    if r.errors:
        raise ConfigError(r.errors)
    return ExperimentConfig(
        mode=mode, grid=grid, field_specs=specs, fields=tuple(fields),
        params=params, n_paths=n_paths, base_seed=seed, stride=stride,
        workers=workers, out_dir=r.words("output.dir", ["out"])[0],
        formats=formats, initial=initial, svi_test=svi_test,
        svi_value=r.float("svi.value"), svi_z0=svi_z0,
        svi_eps=r.float("svi.eps"), svi_lambda=r.float("svi.lambda"),
        sweep=sweep, sweep_reference=None if ref is None else ref - 1,
        denoise_bits=bits,
        denoise_output=r.words("denoise.output", ["denoised.pgm"])[0],
        base_dir=base_dir)


def load_config(path, mode=None):
    with open(path) as fh:
        text = fh.read()
    return parse_config(text, os.path.dirname(os.path.abspath(path)), mode)


def initial_field(spec, grid, x0=None):
    """Realize an :class:`InitialSpec` on ``grid``."""
    from .io import image_to_field, read_pgm, read_snapshot
    if spec.kind == "same":
        return np.array(x0, dtype=np.float64)
    if spec.kind == "constant":
        return np.full(grid.shape, spec.value)
    if spec.kind == "file":
        snap = read_snapshot(spec.file)
        if snap.values.shape != grid.shape:
            raise ValueError(f"{spec.file}: snapshot grid {snap.values.shape} "
                             f"does not match {grid.shape}")
        return snap.values
    if spec.kind == "image":
        return image_to_field(read_pgm(spec.image), grid)
    if spec.center is not None:
        center = np.asarray(spec.center, dtype=np.float64)
    elif grid.kind == TORUS:
        center = 0.5 * np.asarray(grid.lengths)
    else:
        center = np.zeros(2)
    if center.size != grid.dim:
        raise ValueError(f"initial centre needs {grid.dim} coordinates")
    diff = grid.coords - center.reshape(-1, *([1] * grid.dim))
    if grid.kind == TORUS:
        L = np.asarray(grid.lengths).reshape(-1, *([1] * grid.dim))
        diff = (diff + 0.5 * L) % L - 0.5 * L
    r2 = np.sum(diff**2, axis=0)
    if spec.kind == "gaussian":
        bump = np.exp(-r2 / spec.width)
    else:
        bump = (r2 < spec.radius**2).astype(np.float64)
    return spec.offset + spec.amplitude * bump
