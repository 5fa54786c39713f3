import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parc import dns, metrics
from parc.errors import ShapeError, ValidationError
from parc.fields import Field, GridSpec, Snapshot, Trajectory


def traj_from(fn, grid, dt, n, names=("u_x", "u_y"), constants=None):
    X, Y = grid.coords()
    arr = np.stack([np.stack(fn(X, Y, k * dt)) for k in range(n)])
    return Trajectory.from_array(arr, grid, dt, 0.0, names, constants)


def test_rmse_examples():
    g = GridSpec(4, 4, 1.0)
    f = Field(g, np.arange(16.0).reshape(4, 4))
    assert metrics.rmse(f, f) == 0.0
    shifted = Field(g, f.values + 0.5)
    assert metrics.rmse(shifted, f) == 0.5
    assert metrics.rmse(np.ones((2, 2)), np.array([[0.0, 0.0], [0.0, 2.0]])) == 1.0
    with pytest.raises(ShapeError):
        metrics.rmse(np.ones((2, 2)), np.ones((2, 3)))


def test_rmse_u_uses_speed():
    g = GridSpec(4, 4, 1.0)
    z = Field.constant(g, 0.0)
    p = Snapshot(0.0, (Field.constant(g, 3.0), Field.constant(g, 4.0)))
    t = Snapshot(0.0, (z, z))
    assert metrics.rmse_u(p, t) == 5.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_rmse_identity_and_symmetry(seed):
    a, b = np.random.default_rng(seed).normal(size=(2, 5, 5))
    assert metrics.rmse(a, a) == 0.0
    assert metrics.rmse(a, b) == metrics.rmse(b, a)


def test_burgers_residual_constant_field():
    g = GridSpec(8, 8, 0.5)
    t = traj_from(lambda X, Y, s: (0 * X + 1.3, 0 * X - 0.2), g, 0.1, 4)
    assert metrics.burgers_residual(t, R=100.0) == 0.0


def test_burgers_residual_uniform_decay_time_stencil():
    g = GridSpec(6, 6, 1.0)
    dt = 0.1
    t = traj_from(lambda X, Y, s: (0 * X + math.exp(-s), 0 * X), g, dt, 5)
    U = np.stack([s.to_array() for s in t.snapshots])
    dudt = metrics.time_derivative(U, dt)
    for k in (1, 2, 3):
        tk = k * dt
        cd = (math.exp(-tk - dt) - math.exp(-tk + dt)) / (2 * dt)
        # spatial terms vanish, so the residual is the time stencil alone
        assert metrics.burgers_residual(t, R=10.0, at=k) == pytest.approx(abs(cd), rel=1e-12)
        err = abs(dudt[k, 0, 2, 2] + math.exp(-tk))
        assert err == pytest.approx(math.exp(-tk) * (math.sinh(dt) / dt - 1), rel=1e-6)
        assert err == pytest.approx(math.exp(-tk) * dt ** 2 / 6, rel=0.01)


def test_burgers_residual_needs_three_snapshots():
    g = GridSpec(6, 6, 1.0)
    t = traj_from(lambda X, Y, s: (0 * X, 0 * X), g, 0.1, 2)
    with pytest.raises(ValidationError):
        metrics.burgers_residual(t, 1.0)


def test_burgers_residual_diagonal_symmetry():
    cfg = dns.BurgersConfig(grid=dns.default_grid(16), steps_out=4)
    t = dns.generate_trajectory(cfg)
    arr = t.to_array()
    swapped = np.stack([arr[:, 1].transpose(0, 2, 1), arr[:, 0].transpose(0, 2, 1)], axis=1)
    ts = Trajectory.from_array(swapped, t.grid, t.dt)
    assert abs(metrics.burgers_residual(t, 1000.0) - metrics.burgers_residual(ts, 1000.0)) <= 1e-8


def test_ns_residual_static_flow():
    g = GridSpec(8, 8, 0.5)
    t = traj_from(lambda X, Y, s: (0 * X, 0 * X, 0 * X + 7.0), g, 0.1, 3, ("u_x", "u_y", "p"))
    assert metrics.ns_residual(t, rho=1.0, Re=100.0) == 0.0


def test_ns_residual_needs_pressure():
    g = GridSpec(8, 8, 0.5)
    t = traj_from(lambda X, Y, s: (0 * X, 0 * X), g, 0.1, 3)
    with pytest.raises(ValidationError):
        metrics.ns_residual(t, 1.0, 1.0)


def test_ns_residual_rigid_rotation_cancels():
    rho = 2.0
    g = GridSpec(10, 10, 0.2, origin=(-0.9, -0.9))
    t = traj_from(lambda X, Y, s: (-Y, X, rho * (X ** 2 + Y ** 2) / 2), g, 0.1, 3,
                  ("u_x", "u_y", "p"))
    X, Y = g.coords()
    # term by term: convective (-x, -y) and pressure gradient (x, y) cancel
    assert np.max(np.abs(-X + X)) == 0.0
    assert metrics.ns_residual(t, rho, Re=50.0, ring=0) <= 1e-12


def test_ns_residual_taylor_green_order():
    nu, rho = 0.01, 1.0
    errs = []
    for n in (32, 64, 128):
        g = dns.taylor_green_grid(n)
        t = dns.taylor_green_trajectory(g, nu, rho, dt=0.01, steps=2)
        errs.append(metrics.ns_residual(t, rho, 1 / nu, at=1))
    peak = dns.taylor_green_peak_acceleration(dns.taylor_green_grid(128), nu, rho, t=0.01)
    assert errs[-1] <= 5e-2 * peak
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(orders - 2.0) <= 0.3)


def test_divergence_examples():
    g = GridSpec(6, 6, 1.0)
    X, Y = g.coords()
    c = Field.constant(g, 2.0)
    assert metrics.divergence_error(Snapshot(0.0, (c, c))) == (0.0, 0.0)
    s = Snapshot(0.0, (Field(g, X), Field(g, -Y)))
    assert metrics.divergence_error(s)[0] == 0.0
    s = Snapshot(0.0, (Field(g, X), Field(g, Y)))
    signed, absolute = metrics.divergence_error(s)
    assert signed == pytest.approx(2.0, abs=1e-12) and absolute == pytest.approx(2.0, abs=1e-12)


def test_hotspot_examples():
    a = 0.25
    s = metrics.hotspot_series([np.full((10, 10), 1000.0)], [0.0], a)
    assert s.temperature[0] == 1000.0 and s.area[0] == 100 * a
    s = metrics.hotspot_series([np.full((10, 10), 300.0)], [0.0], a)
    assert s.area[0] == 0 and s.temperature[0] == 0 and s.empty[0]
    half = np.full((8, 10), 800.0)
    half[:, :5] = 900.0
    s = metrics.hotspot_series([half], [0.0], a)
    assert s.temperature[0] == 900.0 and s.area[0] == 40 * a


def test_hotspot_threshold_is_inclusive():
    s = metrics.hotspot_series([np.full((4, 4), 875.0)], [0.0], 1.0)
    assert s.area[0] == 16.0


def test_hotspot_rates_are_backward_differences():
    f0 = np.full((4, 4), 800.0)
    f1 = f0.copy()
    f1[0, :2] = 900.0
    s = metrics.hotspot_series([f0, f1], [0.0, 0.5], 2.0)
    assert s.area_rate.tolist() == [(4.0 - 0.0) / 0.5]
    assert s.temperature_rate.tolist() == [(900.0 - 0.0) / 0.5]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_hotspot_temperature_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    f = rng.uniform(800, 1000, size=(6, 6))
    perm = rng.permutation(f.ravel()).reshape(6, 6)
    a = metrics.hotspot_series([f], [0.0], 1.0).temperature[0]
    b = metrics.hotspot_series([perm], [0.0], 1.0).temperature[0]
    assert a == pytest.approx(b, rel=1e-15)


def test_hotspot_errors():
    def series(T, A):
        T, A = np.asarray(T, float), np.asarray(A, float)
        t = np.arange(len(T)) * 0.5
        return metrics.HotspotSeries(t, T, A, np.diff(T) / 0.5, np.diff(A) / 0.5, A == 0)

    s = series([900, 910, 905], [1.0, 2.0, 1.5])
    assert all(v == 0 for v in metrics.hotspot_errors(s, s).values())
    off = series([900, 910, 905], np.array([1.0, 2.0, 1.5]) + 0.01)
    assert metrics.hotspot_errors(off, s)["eps_A_hs"] == pytest.approx(0.01, rel=1e-12)
    # two time points by hand
    p = series([900.0, 904.0], [2.0, 3.0])
    t = series([901.0, 900.0], [2.0, 2.0])
    e = metrics.hotspot_errors(p, t)
    assert e["eps_T_hs"] == pytest.approx(math.sqrt((1 + 16) / 2), rel=1e-15)
    assert e["eps_A_hs"] == pytest.approx(math.sqrt(1 / 2), rel=1e-15)
    assert e["eps_Tdot_hs"] == pytest.approx(abs(4 / 0.5 - (-1) / 0.5), rel=1e-15)
    assert e["eps_Adot_hs"] == pytest.approx(2.0, rel=1e-15)
    with pytest.raises(ShapeError):
        metrics.hotspot_errors(p, series([900.0], [1.0]))


def test_evaluate_identical_is_zero_error_and_csv_round_trip():
    g = GridSpec(6, 6, 1.0)
    rng = np.random.default_rng(0)
    arr = rng.uniform(800, 950, size=(4, 3, 6, 6))
    t = Trajectory.from_array(arr, g, 0.1, channel_names=("u_x", "u_y", "T"))
    rec = metrics.evaluate(t, t, name="same", R=100.0)
    for k in ("rmse_u", "rmse_T", "eps_T_hs", "eps_A_hs", "eps_Tdot_hs", "eps_Adot_hs"):
        assert getattr(rec, k) == 0.0
    text = metrics.records_to_csv([rec])
    row = metrics.read_metrics_csv(text)[0]
    assert row["trajectory"] == "same"
    assert row["burgers_residual"] == rec.burgers_residual
    assert text.splitlines()[0].split(",") == list(metrics.METRIC_COLUMNS)


def test_persistence_repeats_first_frame():
    g = GridSpec(4, 4, 1.0)
    arr = np.random.default_rng(1).normal(size=(3, 2, 4, 4))
    t = Trajectory.from_array(arr, g, 0.2)
    p = metrics.persistence(t)
    assert np.array_equal(p.times(), t.times())
    assert all(np.array_equal(s.to_array(), arr[0]) for s in p.snapshots)
