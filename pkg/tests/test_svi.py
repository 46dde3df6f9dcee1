from dataclasses import replace

import numpy as np
import pytest

from svitv.fields import Constant, Rotation2D, make_field
from svitv.geometry import build_polar_disk, build_torus
from svitv.operators import TV, Power
from svitv.sde import (STRATONOVICH_HEUN, SolverParams, ensemble_path, iterate,
                       simulate)
from svitv.svi import (CONSTANT, REGULARIZED, CauchyTable, SviError,
                       constant_spec, regularization_sweep, regularized_spec,
                       svi_check, svi_gap, test_process_constant,
                       test_process_regularized)

from conftest import bump


@pytest.fixture(scope="module")
def setup():
    g = build_polar_disk(1.0, 12, 24)
    rot = make_field(Rotation2D(), g)
    p = SolverParams(eps=1e-3, lam=1e-2, T=0.01, dt=1e-3, fields=(rot,),
                     solver_tol=1e-12)
    return g, p, bump(g)


def _paths(p, n):
    return [ensemble_path(p, 3, k) for k in range(n)]


def test_constant_zero_process(setup):
    g, p, _ = setup
    z = test_process_constant(0.0, p, _paths(p, 1)[0])
    assert z.variant == CONSTANT
    assert not z.snapshots.any() and not z.generators.any()
    assert z.reconstruction_residual() == 0.0
    assert len(z.snapshots) == p.steps + 1


def test_regularized_from_x0_is_the_solution(setup):
    g, p, x0 = setup
    path = _paths(p, 1)[0]
    z = test_process_regularized(x0, p, path)
    x = simulate(x0, p, path=path).snapshots
    assert z.variant == REGULARIZED
    np.testing.assert_array_equal(z.snapshots, x)


def test_regularized_constant_start(setup):
    g, p, _ = setup
    z = test_process_regularized(np.full(g.shape, 0.4), p, _paths(p, 1)[0])
    np.testing.assert_allclose(z.snapshots, 0.4, atol=1e-13)
    np.testing.assert_allclose(z.generators, 0.0, atol=1e-10)


def test_reconstruction_residual(setup):
    g, p, x0 = setup
    z = test_process_regularized(0.5 * x0 + 0.1 * bump(g, (-0.2, 0.3), 0.1),
                                 p, _paths(p, 1)[0])
    assert z.reconstruction_residual() <= 1e-10


def test_identical_runs_have_zero_gap(setup):
    g, p, x0 = setup
    paths = _paths(p, 2)
    Z = [test_process_regularized(x0, p, path) for path in paths]
    X = [z.snapshots for z in Z]
    rep = svi_gap(X, Z, TV(), p)
    np.testing.assert_array_equal(rep.gap, 0.0)
    assert rep.worst_excursion() == 0.0


def test_streaming_matches_stored(setup):
    g, p, x0 = setup
    paths = _paths(p, 2)
    c = float(np.sum(g.weights * x0) / g.measure)
    X = [simulate(x0, p, path=path).snapshots for path in paths]
    Z = [test_process_constant(c, p, path) for path in paths]
    stored = svi_gap(X, Z, TV(), p)
    streamed = svi_check(x0, p, constant_spec(c), 2, base_seed=3)
    np.testing.assert_allclose(streamed.lhs, stored.lhs, rtol=1e-13)
    np.testing.assert_allclose(streamed.rhs, stored.rhs, rtol=1e-13)
    assert len(list(streamed.rows())) == p.steps + 1


def test_gap_small_for_constant_test(setup):
    g, p, x0 = setup
    c = float(np.sum(g.weights * x0) / g.measure)
    rep = svi_check(x0, p, constant_spec(c), 2, base_seed=0)
    assert rep.gap[0] == 0.0
    assert rep.worst_excursion() <= 10 * (p.dt + p.lam + p.eps)


def test_errors(setup):
    g, p, x0 = setup
    with pytest.raises(SviError):
        regularized_spec(x0, replace(p, integrator=STRATONOVICH_HEUN))
    with pytest.raises(SviError):
        svi_check(x0, p, constant_spec(0.0), 1, 0, kind=Power(1.5))
    with pytest.raises(SviError):
        svi_gap([], [], TV(), p)
    with pytest.raises(SviError):
        svi_check(x0, p, constant_spec(0.0), 0, 0)


def test_sweep_identical_entries():
    g = build_torus(2, (12, 12), (1.0, 1.0))
    p = SolverParams(T=0.005, dt=1e-3, fields=(make_field(Constant((0.5, 0.1)), g),))
    table = regularization_sweep(bump(g, (0.5, 0.5)), p,
                                 [(0.0, 0.01, 0.0), (0.0, 0.01, 0.0),
                                  (0.0, 0.02, 0.0)], 2, 0)
    assert table.distance[0, 1] == 0.0
    assert table.distance[0, 2] > 0
    np.testing.assert_array_equal(table.distance, table.distance.T)


def test_sweep_resolvent_ladder():
    g = build_torus(2, (12, 12), (1.0, 1.0))
    p = SolverParams(T=0.005, dt=1e-3, grid=g,
                     fields=(make_field(Constant((0.5, 0.1)), g),))
    ladder = [(0.0, 0.01, d) for d in (1e-1, 1e-2, 1e-3, 0.0)]
    table = regularization_sweep(bump(g, (0.5, 0.5)), p, ladder, 1, 0)
    d = table.to_reference(3)
    assert d[0] > d[1] > d[2] > 0


def test_fit_exponent_recovers_power():
    ladder = [(0.0, lam, 0.0) for lam in (0.04, 0.02, 0.01, 0.001)]
    ref = 3
    dist = np.zeros((4, 4))
    for i, e in enumerate(ladder):
        dist[i, ref] = dist[ref, i] = 0.7 * (e[1] + 0.001) ** 0.5
    table = CauchyTable(ladder, dist, 1)
    assert table.fit_exponent("lam", ref) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(SviError):
        table.fit_exponent("eps", ref)


def test_iterate_matches_regularized_stream(setup):
    g, p, x0 = setup
    path = _paths(p, 1)[0]
    xs = np.array([u.copy() for _, _, u in iterate(x0, p, path)])
    z = test_process_regularized(x0, p, path)
    np.testing.assert_array_equal(z.snapshots.reshape(len(xs), -1), xs)
