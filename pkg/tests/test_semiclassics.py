from __future__ import annotations

import math

import numpy as np
import pytest

from dqpt_er import collective, netgen, semiclassics as sc
from dqpt_er.hamcore import QuenchSpec


def test_rhs_examples():
    net = netgen.generate(6, 0.5, 1)
    rng = np.random.default_rng(0)
    cfg = rng.normal(size=(6, 3))
    assert np.all(sc.mf_rhs(net, 0.0, cfg)[:, 2] == 0)
    up = np.tile([0.0, 0.0, 1.0], (6, 1))
    d = sc.mf_rhs(net, 0.8, up)
    assert np.allclose(d[:, 1], 1.6) and np.allclose(d[:, 0], 0)


def test_rhs_two_site_by_hand():
    net = netgen.Network(2, 0.5, 0, np.array([[0, 1]]))
    (x0, y0, z0), (x1, y1, z1) = (0.3, -0.4, 0.5), (-0.2, 0.7, 0.1)
    h = 0.9
    c = 2 * 2 * 1.0 / 1  # 2 N J / |E|
    expect = np.array([[c * z1 * y0, -c * z1 * x0 + 2 * h * z0, -2 * h * y0],
                       [c * z0 * y1, -c * z0 * x1 + 2 * h * z1, -2 * h * y1]])
    got = sc.mf_rhs(net, h, np.array([[x0, y0, z0], [x1, y1, z1]]))
    assert np.allclose(got, expect, atol=1e-15)


def test_edgeless_graph_precesses_freely():
    net = netgen.Network(3, 0.1, 0, np.zeros((0, 2)))
    rec = sc.integrate_trajectory(net, QuenchSpec(0.5, t_max=2))
    assert np.allclose(rec.theta_z[:, 0], np.cos(2 * 0.5 * rec.times), atol=1e-8)


def test_long_run_conservation():
    net = netgen.generate(40, 0.5, 2)
    spec = QuenchSpec(0.7, t_max=100)
    rng = np.random.default_rng(1)
    v = rng.normal(size=(40, 3))
    init = v / np.linalg.norm(v, axis=1, keepdims=True)
    rec = sc.integrate_trajectory(net, spec, init, track_energy=True)
    assert rec.length_drift < 1e-6
    e = rec.energy[:, 0]
    assert np.max(np.abs(e - e[0])) < 1e-6 * abs(e[0])


def test_step_halving_convergence():
    net = netgen.generate(30, 0.5, 4)
    assert sc.step_halving_error(net, QuenchSpec(0.6, dt=0.01, t_max=10)) < 1e-6


def test_drift_guard_trips_on_coarse_steps():
    net = netgen.generate(20, 0.5, 4)
    with pytest.raises(sc.IntegrationError):
        sc.integrate_trajectory(net, QuenchSpec(2.0, dt=0.5, t_max=20))


def test_complete_graph_reproduces_collective_orbit():
    spec = QuenchSpec(0.6, t_max=10)
    rec = sc.integrate_trajectory(netgen.complete(25), spec)
    orbit = collective.classical_orbit(0.6, times=spec.times, dt=0.01)
    assert np.max(np.abs(rec.theta_z[:, 0] - orbit.theta_z)) < 1e-6
    ks = rec.k_mean[:, 0]
    assert np.max(np.abs(ks - orbit.k)) < 1e-6


def test_sweep_matches_individual_runs():
    net = netgen.generate(30, 0.5, 9)
    spec = QuenchSpec(1.0, t_max=3)
    sweep = sc.meanfield_sweep(net, [0.4, 1.7], spec, max_angle=None)
    for b, h in enumerate([0.4, 1.7]):
        one = sc.integrate_trajectory(net, QuenchSpec(h, t_max=3))
        assert np.max(np.abs(sweep.theta_z[:, b] - one.theta_z[:, 0])) < 1e-12


def test_float32_field_close_to_float64():
    net = netgen.generate(200, 0.5, 1)
    spec = QuenchSpec(1.0, t_max=5)
    a = sc.meanfield_sweep(net, [0.6], spec)
    b = sc.meanfield_sweep(net, [0.6], spec, field_dtype=np.float32)
    assert np.max(np.abs(a.theta_z - b.theta_z)) < 1e-4


def test_perturbed_init():
    s = sc.perturbed_config(10, seed=3, eps=1e-3, batch=2)
    assert np.allclose(np.sum(s ** 2, axis=0), 1)
    assert np.all(np.abs(s[:2]) <= 1e-3) and np.any(s[:2] != 0)
    assert np.array_equal(s, sc.perturbed_config(10, seed=3, eps=1e-3, batch=2))
    with pytest.raises(ValueError):
        sc.initial_config(4, "noisy")


def test_dtwa_sample_statistics():
    n, draws = 10, 10_000
    s = sc.dtwa_sample_batch(n, 5, 0, draws)  # 10^5 spin samples
    assert np.all(s[2] == 1)
    assert np.all(np.sum(s ** 2, axis=0) == 3)
    assert np.all(s[0] ** 2 == 1)
    total = n * draws
    for axis in (0, 1):
        assert abs(s[axis].mean()) < 4 / math.sqrt(total)
    single = sc.dtwa_sample_initial(n, 5, trajectory=17)
    assert np.array_equal(single, s[:, 17, :].T)


def test_dtwa_run_basics():
    net = netgen.generate(8, 0.5, 0)
    batch = sc.dtwa_run(net, QuenchSpec(1.0, t_max=1), 500, seed=3, batch_size=128)
    assert batch.mean("theta_z")[0] == 1.0
    assert batch.mean("theta_z_sq")[0] == 1.0
    still = sc.dtwa_run(net, QuenchSpec(0.0, t_max=1), 50, seed=3)
    assert np.all(still.mean("theta_z") == 1.0)
    # chunking does not change the average beyond summation-order rounding
    other = sc.dtwa_run(net, QuenchSpec(1.0, t_max=1), 500, seed=3, batch_size=500)
    assert np.allclose(batch.mean("theta_z"), other.mean("theta_z"), atol=1e-13)


def test_dtwa_k_mean_symmetric_at_t0():
    net = netgen.generate(10, 0.5, 0)
    batch = sc.dtwa_run(net, QuenchSpec(1.0, t_max=0.1), 4000, seed=1)
    t, theta, k = sc.phase_portrait(batch)
    assert theta[0] == 1.0
    assert abs(k[0]) < 4 * batch.se("k_mean")[0]


def test_dtwa_standard_error_scaling():
    net = netgen.generate(8, 0.5, 0)
    spec = QuenchSpec(2.0, t_max=1)
    se = [sc.dtwa_run(net, spec, n, seed=2).se("theta_z")[-1] for n in (400, 4000)]
    assert se[0] / se[1] == pytest.approx(math.sqrt(10), rel=0.2)


def test_theta_sq_estimator_identity():
    z = np.array([[1.0, -1.0, 1.0, 1.0]])
    # 1/N + (1/N^2) sum_{i != j} z_i z_j
    n = 4
    cross = sum(z[0, i] * z[0, j] for i in range(n) for j in range(n) if i != j)
    assert sc.theta_sq_estimate(z)[0] == pytest.approx(1 / n + cross / n ** 2)


def test_damped_oscillation_peaks():
    net = netgen.generate(1000, 0.5, 0)
    batch = sc.dtwa_run(net, QuenchSpec(0.6, t_max=12), 100, seed=0)
    theta = batch.mean("theta_z")
    peaks = sc.oscillation_peaks(theta)[:5]
    assert len(peaks) == 5
    assert np.all(np.diff(theta[peaks]) < 0)


def test_portrait_regions():
    # below the transition the mean magnetization stays positive; above it crosses zero
    for h, crosses in ((0.6, False), (2.0, True)):
        rec = sc.integrate_trajectory(netgen.complete(20), QuenchSpec(h, t_max=8))
        assert bool(rec.theta_z.min() < 0) is crosses


def test_csv_writers(tmp_path):
    net = netgen.generate(6, 0.5, 0)
    batch = sc.dtwa_run(net, QuenchSpec(1.0, t_max=0.1), 10, seed=0)
    batch.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().splitlines()[0] == ",".join(sc.TRAJ_COLUMNS)
    sc.write_portrait_csv(tmp_path / "p.csv", *sc.phase_portrait(batch))
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == ",".join(sc.PORTRAIT_COLUMNS)


def test_dtwa_refined_steps_conserve_length():
    net = netgen.generate(40, 0.5, 2)
    model = sc.MeanFieldModel(net, 0.7)
    init = sc.dtwa_sample_batch(40, 1, 0, 4)
    spec = QuenchSpec(0.7, t_max=100)
    plain = sc.integrate_batch(model, init, spec, drift_tol=None)
    refined = sc.integrate_batch(model, init, spec, drift_tol=None, max_angle=sc.MAX_ANGLE)
    assert refined.length_drift < 1e-6 < plain.length_drift
    assert np.array_equal(refined.times, plain.times)
    # the refinement is a no-op once the angle bound is generous
    loose = sc.integrate_batch(model, init, QuenchSpec(0.7, t_max=1), max_angle=10.0)
    same = sc.integrate_batch(model, init, QuenchSpec(0.7, t_max=1))
    assert np.array_equal(loose.theta_z, same.theta_z)


def test_long_sweep_stays_within_drift_guard():
    # 100 periods at h = 0.8 need t ~ 200; fixed dt = 0.01 steps alone drift past 1e-6 there
    net = netgen.generate(100, 0.5, 0)
    spec = QuenchSpec(1.0, t_max=200)
    rec = sc.meanfield_sweep(net, [0.8, 2.0], spec)
    assert rec.length_drift < 1e-6
    with pytest.raises(sc.IntegrationError):
        sc.meanfield_sweep(net, [0.8, 2.0], spec, max_angle=None)
