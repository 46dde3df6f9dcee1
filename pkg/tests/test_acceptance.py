"""Acceptance suite: one test per criterion, each at its stated tolerance.

Run ``pytest tests/test_acceptance.py -v``; a per-criterion pass/fail table
is printed at the end of the session.
"""

import math
import time

import numpy as np
import pytest

from svitv.cli import main
from svitv.fields import (Constant, Cross3D, Linear, Rotation2D, analytic_field,
                          ball_samples, grid_samples, killing_residual,
                          make_field, validate_assumption)
from svitv.geometry import build_polar_disk, build_torus, inner_product, norm
from svitv.operators import (apply_B, apply_B_squared, commutation_check,
                             dense_operator, divergence, gradient,
                             laplacian_neumann, yosida_map, yosida_power,
                             yosida_sgn)
from svitv.sde import (EXPLICIT, ITO_EULER, STRATONOVICH_HEUN, SolverParams,
                       ensemble, simulate)
from svitv.svi import constant_spec, regularization_sweep, regularized_spec, svi_check

from test_operators import _power_oracle, _prox_sgn_oracle


def gauss(g, c, width):
    x, y = g.coords
    return np.exp(-((x - c[0]) ** 2 + (y - c[1]) ** 2) / width)


def finish(record_property, ok, detail):
    record_property("detail", detail)
    assert ok, detail


def vec_ip(F, G, g):
    return float(np.sum(g.weights * np.sum(F * G, axis=0)))


# --------------------------------------------------------------------------


def test_criterion_01_operator_identities(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    torus = build_torus(2, (32, 32), (1.0, 1.0))
    disk = build_polar_disk(1.0, 32, 64)
    pairs = [(torus, make_field(Constant((0.7, -0.3)), torus)),
             (disk, make_field(Rotation2D(), disk))]
    worst = {k: 0.0 for k in ("adjoint", "skew", "uBu", "B2", "lap_sym",
                              "lap_neg")}
    for g, b in pairs:
        for _ in range(20):
            u, v = rng.standard_normal((2, *g.shape))
            F = rng.standard_normal((2, *g.shape))
            Gu, dF = gradient(u, g), divergence(F, g)
            worst["adjoint"] = max(worst["adjoint"], abs(
                vec_ip(Gu, F, g) + inner_product(u, dF, g)) / (
                math.sqrt(vec_ip(Gu, Gu, g) * vec_ip(F, F, g))
                + norm(u, g) * norm(dF, g)))
            Bu, Bv = apply_B(u, b), apply_B(v, b)
            worst["skew"] = max(worst["skew"], abs(
                inner_product(Bu, v, g) + inner_product(u, Bv, g))
                / (norm(Bu, g) * norm(v, g) + norm(u, g) * norm(Bv, g)))
            worst["uBu"] = max(worst["uBu"], abs(inner_product(u, Bu, g))
                               / (norm(u, g) * norm(Bu, g)))
            B2v = apply_B_squared(v, b)
            worst["B2"] = max(worst["B2"], abs(
                inner_product(u, B2v, g) + inner_product(Bu, Bv, g))
                / (norm(u, g) * norm(B2v, g) + norm(Bu, g) * norm(Bv, g)))
            Lu, Lv = laplacian_neumann(u, g), laplacian_neumann(v, g)
            worst["lap_sym"] = max(worst["lap_sym"], abs(
                inner_product(Lu, v, g) - inner_product(u, Lv, g))
                / (norm(Lu, g) * norm(v, g) + norm(u, g) * norm(Lv, g)))
            worst["lap_neg"] = max(worst["lap_neg"], max(
                0.0, inner_product(Lu, u, g)) / (norm(Lu, g) * norm(u, g)))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-12 and elapsed < 10
    detail = ("max relative defects " + ", ".join(
        f"{k}={v:.1e}" for k, v in worst.items()) + f" (limit 1e-12); {elapsed:.1f} s")
    finish(record_property, ok, detail)


def test_criterion_02_killing_assumption(record_property):
    t0 = time.perf_counter()
    disk = build_polar_disk(1.0, 32, 64)
    rot = validate_assumption([make_field(Rotation2D(), disk)], disk, tol=1e-10)
    cross = validate_assumption([analytic_field(Cross3D())], ball_samples(),
                                tol=1e-10)
    strain = make_field(Linear(((1.0, 0.0), (0.0, -1.0))), disk)
    bad = validate_assumption([strain], disk, tol=1e-10)
    kres = killing_residual(strain, grid_samples(disk)[0])
    worst_bad = max(c.residual for c in bad.conditions if not c.skipped)
    elapsed = time.perf_counter() - t0
    ok = (rot.passed and cross.passed and not bad.passed
          and abs(kres - 2) <= 1e-12 and abs(worst_bad - 2) <= 1e-12
          and elapsed < 5)
    detail = (f"rotation disk {'pass' if rot.passed else 'fail'}, cross3d ball "
              f"{'pass' if cross.passed else 'fail'}, (x1,-x2) "
              f"{'fails' if not bad.passed else 'passes'} with Killing residual "
              f"{kres:.15g} and worst condition {worst_bad:.15g}; {elapsed:.1f} s")
    finish(record_property, ok, detail)


def test_criterion_03_resolvent_commutation(record_property):
    t0 = time.perf_counter()
    tol = 1e-12
    rng = np.random.default_rng(3)
    torus = build_torus(2, (32, 32), (1.0, 1.0))
    disk = build_polar_disk(1.0, 32, 64)
    res = []
    for g, b in ((torus, make_field(Constant((0.7, -0.3)), torus)),
                 (disk, make_field(Rotation2D(), disk))):
        for delta in (1e-3, 1e-2, 1e-1):
            res.append(commutation_check(b, delta, rng.standard_normal(g.shape),
                                         tol))
    small = build_torus(2, (8, 8), (1.0, 1.0))
    bs = make_field(Constant((0.7, -0.3)), small)
    B = dense_operator(lambda u: apply_B(u, bs), small)
    L = dense_operator(lambda u: laplacian_neumann(u, small), small)
    J = np.linalg.inv(np.eye(small.size) - 0.1 * L)
    oracle = np.linalg.norm(B @ J - J @ B, 2) / np.linalg.norm(B, 2)
    elapsed = time.perf_counter() - t0
    ok = max(res) <= 100 * tol and oracle <= 1e-12 and elapsed < 30
    detail = (f"max commutation residual {max(res):.1e} (limit {100 * tol:.0e}), "
              f"dense 8x8 oracle {oracle:.1e} (limit 1e-12); {elapsed:.1f} s")
    finish(record_property, ok, detail)


def test_criterion_04_pure_noise_invariance(record_property):
    t0 = time.perf_counter()
    disk = build_polar_disk(1.0, 32, 64)
    rot = make_field(Rotation2D(), disk)
    x0 = np.exp(-3 * disk.r[:, None] ** 2) * (1 + 0 * disk.theta)
    p = SolverParams(T=1.0, dt=5e-3, fields=(rot,), drift=False)
    dev = 0.0
    for k in range(20):
        traj = simulate(x0, p, seed=k, stride=1)
        dev = max(dev, max(norm(s - x0, disk) for s in traj.snapshots)
                  / norm(x0, disk))
    elapsed = time.perf_counter() - t0
    ok = dev <= 1e-12 and elapsed < 60
    detail = f"max relative path deviation {dev:.1e} over 20 paths (limit 1e-12); {elapsed:.1f} s"
    finish(record_property, ok, detail)


def _matrix():
    disk = build_polar_disk(1.0, 32, 64)
    small_disk = build_polar_disk(1.0, 16, 32)
    torus = build_torus(2, (32, 32), (1.0, 1.0))
    small_torus = build_torus(2, (16, 16), (1.0, 1.0))
    for g in (disk, small_disk):
        g_fields = (make_field(Rotation2D(), g),)
        yield g, g_fields, gauss(g, (0.4, 0.0), 0.05)
    for g in (torus, small_torus):
        g_fields = (make_field(Constant((0.5, 0.2)), g),
                    make_field(Constant((-0.3, 0.4)), g))
        yield g, g_fields, gauss(g, (0.4, 0.5), 0.05)


def test_criterion_05_mass_conservation(record_property):
    t0 = time.perf_counter()
    (disk, dfs, dx0), (sdisk, sdfs, sdx0), (torus, tfs, tx0), (stor, stfs, stx0) = _matrix()
    configs = []
    for g, fs, x0 in ((disk, dfs, dx0), (torus, tfs, tx0)):
        for integ in (ITO_EULER, STRATONOVICH_HEUN):
            for p_exp in (1.0, 1.5):
                configs.append((x0, dict(fields=fs, integrator=integ, p=p_exp,
                                         eps=1e-3)))
        configs.append((x0, dict(fields=fs, drift=False)))
        configs.append((x0, dict(fields=fs, ito_only=True)))
    for g, fs, x0 in ((sdisk, sdfs, sdx0), (stor, stfs, stx0)):
        configs.append((x0, dict(fields=fs, delta=1e-2)))
        configs.append((x0, dict(fields=fs, delta=1e-2, p=1.5,
                                 integrator=STRATONOVICH_HEUN)))
        configs.append((x0, dict(fields=fs, drift_scheme=EXPLICIT, dt=1e-5)))
    worst = 0.0
    for x0, kw in configs:
        kw.setdefault("dt", 1e-3)
        p = SolverParams(lam=1e-2, T=5 * kw["dt"], **kw)
        res = ensemble(x0, p, 2, base_seed=5)
        g = p.grid
        m0 = inner_product(x0, np.ones(g.shape), g)
        worst = max(worst, float(np.max(np.abs(res.per_path["mass"] - m0)))
                    / abs(m0))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10
    detail = (f"{len(configs)} configurations x 2 paths, max relative mass "
              f"drift {worst:.1e} (limit 1e-10); {elapsed:.1f} s")
    finish(record_property, ok, detail)


@pytest.fixture(scope="module")
def contraction_runs():
    """64 paths of a paired TV-flow ensemble at dt and dt/2, shared noise."""
    disk = build_polar_disk(1.0, 64, 64)
    rot = make_field(Rotation2D(), disk)
    x0 = gauss(disk, (0.4, 0.0), 0.05)
    y0 = x0 + 0.3 * gauss(disk, (-0.3, 0.2), 0.03)
    out = {}
    for dt, refine in ((1e-3, 2), (5e-4, 1)):
        p = SolverParams(eps=1e-3, lam=1e-2, T=0.01, dt=dt, fields=(rot,))
        t0 = time.perf_counter()
        res = ensemble(x0, p, 64, base_seed=7, y0=y0, refine=refine)
        out[dt] = (res, time.perf_counter() - t0)
    return out


def _halving(v_full, v_half):
    """The violation must scale like dt: v(dt/2) / v(dt) in [0.35, 0.65]."""
    return 0.35 * v_full <= v_half <= 0.65 * v_full


def test_criterion_06_contraction(record_property, contraction_runs):
    v, se = {}, {}
    for dt, (res, _) in contraction_runs.items():
        ratio = res.diff_sq / res.diff_sq[0]
        v[dt] = max(0.0, float(np.max(ratio)) - 1.0)
        per = res.per_path["diff_sq"] / res.diff_sq[0]
        se[dt] = float(np.max(per.std(axis=0) / math.sqrt(per.shape[0])))
    C = v[1e-3] / 1e-3
    elapsed = contraction_runs[1e-3][1]
    ok = C < 10 and _halving(v[1e-3], v[5e-4]) and elapsed < 300
    detail = (f"violation {v[1e-3]:.2e} at dt=1e-3, {v[5e-4]:.2e} at dt=5e-4 "
              f"(C={C:.2f}, MC s.e. {se[1e-3]:.1e}); dt=1e-3 run {elapsed:.0f} s")
    finish(record_property, ok, detail)


def test_criterion_07_energy_estimate(record_property, contraction_runs):
    v = {}
    for dt, (res, _) in contraction_runs.items():
        for rec in (res.mean, res.paired):
            ratio = rec.grad_l2_sq / rec.grad_l2_sq[0]
            v[dt] = max(v.get(dt, 0.0), max(0.0, float(np.max(ratio)) - 1.0))
    C = v[1e-3] / 1e-3
    ok = C < 10 and _halving(v[1e-3], v[5e-4])
    detail = (f"E|grad X|^2 excess {v[1e-3]:.2e} at dt=1e-3, {v[5e-4]:.2e} at "
              f"dt=5e-4 (C={C:.2f})")
    finish(record_property, ok, detail)


def test_criterion_08_lambda_cauchy(record_property):
    t0 = time.perf_counter()
    g = build_torus(2, (32, 32), (1.0, 1.0))
    x, y = g.coords
    x0 = (((x - 0.5) ** 2 + (y - 0.5) ** 2) < 0.09).astype(float)
    p = SolverParams(eps=1e-3, T=0.02, dt=1e-3,
                     fields=(make_field(Constant((0.3, 0.2)), g),))
    ladder = [(1e-3, lam, 0.0) for lam in (4e-2, 2e-2, 1e-2, 1e-3)]
    table = regularization_sweep(x0, p, ladder, 8, base_seed=11)
    d = table.to_reference(3)
    ratios = d[:-1] / d[1:]
    elapsed = time.perf_counter() - t0
    ok = (np.all(np.diff(d) < 0) and np.all((1.5 <= ratios) & (ratios <= 3))
          and elapsed < 600)
    detail = ("sup_t rms distances to lambda=1e-3: " + ", ".join(
        f"{v:.3e}" for v in d) + "; ratios " + ", ".join(
        f"{r:.2f}" for r in ratios) + f" (band [1.5, 3]); {elapsed:.0f} s")
    finish(record_property, ok, detail)


def test_criterion_09_svi_gap(record_property):
    t0 = time.perf_counter()
    C = 1.0
    disk = build_polar_disk(1.0, 32, 32)
    rot = make_field(Rotation2D(), disk)
    x0 = gauss(disk, (0.4, 0.0), 0.05)
    z0 = x0 + 0.3 * gauss(disk, (-0.3, 0.2), 0.03)
    mean = float(np.sum(disk.weights * x0) / disk.measure)
    worst, bound_ok = {}, True
    for dt, lam, refine in ((1e-3, 1e-2, 2), (5e-4, 5e-3, 1)):
        p = SolverParams(lam=lam, T=0.05, dt=dt, fields=(rot,), solver_tol=1e-12)
        for name, spec in (("constant", constant_spec(mean)),
                           ("zero", constant_spec(0.0)),
                           ("regularized", regularized_spec(z0, p))):
            rep = svi_check(x0, p, spec, 8, base_seed=3, refine=refine)
            worst[name, dt] = rep.worst_excursion()
            bound_ok &= bool(np.all(rep.gap >= -C * (dt + lam + p.eps)))
    halves = all(worst[n, 5e-4] <= 0.5 * worst[n, 1e-3]
                 for n in ("constant", "zero", "regularized"))
    elapsed = time.perf_counter() - t0
    ok = bound_ok and halves and elapsed < 600
    detail = ("worst excursions (dt, dt/2): " + ", ".join(
        f"{n} {worst[n, 1e-3]:.1e} -> {worst[n, 5e-4]:.1e}"
        for n in ("constant", "zero", "regularized"))
        + f"; gap >= -{C:g}(dt+lam+eps) {'holds' if bound_ok else 'violated'}; "
        f"{elapsed:.0f} s")
    finish(record_property, ok, detail)


def test_criterion_10_yosida_maps(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    fails = 0
    for p in (1.0, 1.5):
        lam = 0.05
        scale = rng.choice([1e-3, 1e-1, 1.0, 10.0], (1, 10_000))
        a = rng.standard_normal((2, 10_000)) * scale
        b = rng.standard_normal((2, 10_000)) * scale
        Pa, Pb = yosida_map(a, lam, p), yosida_map(b, lam, p)
        dx = np.linalg.norm(a - b, axis=0)
        mono = np.sum((Pa - Pb) * (a - b), axis=0) >= -1e-14 * dx**2 / lam
        lip = np.linalg.norm(Pa - Pb, axis=0) <= dx / lam * (1 + 1e-12)
        fails += int(np.sum(~mono) + np.sum(~lip))
    table = [(yosida_sgn(np.array([0.25, 0.0]), 0.5),
              _prox_sgn_oracle(np.array([0.25, 0.0]), 0.5)),
             (yosida_sgn(np.array([3.0, 4.0]), 0.5),
              _prox_sgn_oracle(np.array([3.0, 4.0]), 0.5)),
             (yosida_power(np.array([1.0, 0.0]), 0.1, 1.5),
              _power_oracle(np.array([1.0, 0.0]), 0.1, 1.5))]
    err = max(float(np.max(np.abs(a - b))) for a, b in table)
    elapsed = time.perf_counter() - t0
    ok = fails == 0 and err <= 1e-10 and elapsed < 5
    detail = (f"{fails} of 40000 monotonicity/Lipschitz checks failed; "
              f"tabulated examples vs oracles max error {err:.1e} (limit 1e-10); "
              f"{elapsed:.2f} s")
    finish(record_property, ok, detail)


SMOKE = """\
domain.kind = torus
domain.cells = 16, 16
field.1.kind = constant
field.1.vector = 0.3, 0.1
solver.eps = 0.01
solver.T = 0.01
solver.dt = 0.001
ensemble.stride = 5
ensemble.n_paths = 4
"""


def test_criterion_11_reproducibility(record_property, tmp_path):
    cfg = tmp_path / "smoke.cfg"
    cfg.write_text(SMOKE)
    outs = []
    for workers in ("1", "2"):
        out = tmp_path / f"w{workers}"
        assert main(["simulate", "--config", str(cfg), "--seed", "123",
                     "--out", str(out), "--workers", workers]) == 0
        outs.append(out)
    same = ((outs[0] / "diagnostics.csv").read_bytes()
            == (outs[1] / "diagnostics.csv").read_bytes())
    rows = (outs[0] / "diagnostics.csv").read_text().splitlines()
    snaps = sorted(p.name for p in outs[0].glob("*.svif"))
    ok = same and len(rows) == 12 and len(snaps) == 3
    detail = (f"diagnostics.csv byte-identical for 1 and 2 workers: {same}; "
              f"{len(rows) - 1} rows, {len(snaps)} snapshots")
    finish(record_property, ok, detail)
