import math

import numpy as np
import pytest

from qbdspin.dynamics import (MemoryRecord, Trajectory, evolve_damped,
                              measure_recall, recall_pulse, smoothed_excess,
                              store_memory)
from qbdspin.errors import DomainError, InsufficientDataError, StepSizeError
from qbdspin.lattice import build_lattice, nn_table, reference_config
from qbdspin.model import energy_delta, local_field, total_energy
from qbdspin.montecarlo import ChainParams

T_C = 1.4429


def cubic(L=4):
    lat = build_lattice(3, [L] * 3, 1.0, True)
    return lat, nn_table(lat, 1.0)


# --------------------------------------------------------------------------
# storage

def test_store_memory_low_temperature_orders():
    lat, table = cubic(6)
    params = ChainParams(T=1.0, sweeps=3000, burn_in=800, seed=50)
    cfg, record = store_memory(lat, table, 0.1 * T_C, params)
    assert record.order_magnitude >= 0.8
    assert np.linalg.norm(record.order_direction) == pytest.approx(1.0, abs=1e-12)
    assert record.T_store == pytest.approx(0.1 * T_C)
    assert np.allclose(cfg.magnetization(),
                       record.order_magnitude * record.order_direction)


def test_store_memory_high_temperature_disorders():
    lat, table = cubic(8)
    params = ChainParams(T=1.0, sweeps=2000, burn_in=500, seed=51)
    _, record = store_memory(lat, table, 10.0 * T_C, params)
    assert record.order_magnitude <= 0.15


def test_store_memory_direction_is_spontaneous():
    lat, table = cubic(4)
    directions = []
    for seed in (1, 2):
        params = ChainParams(T=1.0, sweeps=2500, burn_in=600, seed=seed)
        _, record = store_memory(lat, table, 0.1 * T_C, params)
        directions.append(record.order_direction)
        assert np.linalg.norm(record.order_direction) == pytest.approx(1.0, abs=1e-12)
    assert float(directions[0] @ directions[1]) < 0.999


def test_store_memory_rejects_afm_table():
    lat = build_lattice(3, [4, 4, 4], 1.0, True)
    table = nn_table(lat, 1.0, sign=-1)
    with pytest.raises(DomainError):
        store_memory(lat, table, 0.1, ChainParams(T=1.0, sweeps=100, seed=0))


# --------------------------------------------------------------------------
# recall pulse

def test_pulse_vanishing_tilt_limit():
    lat, table = cubic(4)
    cfg = reference_config(lat, "aligned")
    out = recall_pulse(cfg, [0, 5], 1e-12)
    assert np.max(np.abs(out.spins - cfg.spins)) < 1e-11


def test_pulse_energy_cost_single_site():
    lat, table = cubic(4)
    cfg = reference_config(lat, "aligned")
    h = local_field(cfg, table, 0)
    out = recall_pulse(cfg, [0], math.pi / 2,
                       order_direction=np.array([0.0, 0.0, 1.0]))
    de = total_energy(out, table).total - total_energy(cfg, table).total
    assert de == pytest.approx(np.linalg.norm(h), rel=1e-12)
    # and it agrees with the single-move energy evaluator
    assert de == pytest.approx(energy_delta(cfg, table, 0, out.spins[0]), abs=1e-10)


def test_pulse_on_all_sites_is_a_global_rotation():
    lat, table = cubic(4)
    cfg = reference_config(lat, "aligned")
    e0 = total_energy(cfg, table).total
    out = recall_pulse(cfg, np.arange(lat.n_sites), 0.7,
                       order_direction=np.array([0.0, 0.0, 1.0]))
    e1 = total_energy(out, table).total
    assert abs(e1 - e0) / abs(e0) <= 1e-10
    norms = np.linalg.norm(out.spins, axis=1)
    assert np.max(np.abs(norms - 1.0)) < 1e-12


def test_pulse_validation():
    lat, table = cubic(4)
    cfg = reference_config(lat, "aligned")
    with pytest.raises(DomainError):
        recall_pulse(cfg, [], 0.5)
    with pytest.raises(DomainError):
        recall_pulse(cfg, [0], 0.0)
    with pytest.raises(DomainError):
        recall_pulse(cfg, [0], 2.0)
    with pytest.raises(DomainError):
        recall_pulse(cfg, [lat.n_sites], 0.5)


# --------------------------------------------------------------------------
# damped evolution

def test_aligned_state_is_stationary():
    lat, table = cubic(4)
    cfg = reference_config(lat, "aligned")
    traj = evolve_damped(cfg, table, alpha=0.0, dt=0.01, steps=40)
    assert np.all(traj.energy == traj.energy[0])
    assert np.all(traj.m == traj.m[0])


def test_norms_preserved_every_frame():
    lat, table = cubic(4)
    cfg = reference_config(lat, "aligned")
    pulsed = recall_pulse(cfg, [0, 3, 17], 0.6,
                          order_direction=np.array([0.0, 0.0, 1.0]))
    final = pulsed.copy()
    evolve_damped(final, table, alpha=0.05, dt=0.02, steps=500)
    assert np.max(np.abs(np.linalg.norm(final.spins, axis=1) - 1.0)) <= 1e-9


def test_conservative_drift_shrinks_with_dt():
    lat, table = cubic(4)
    cfg = reference_config(lat, "aligned")
    pulsed = recall_pulse(cfg, [0], math.pi / 4,
                          order_direction=np.array([0.0, 0.0, 1.0]))
    t1 = evolve_damped(pulsed, table, 0.0, 0.02, 1000)
    t2 = evolve_damped(pulsed, table, 0.0, 0.01, 2000)
    d1 = np.max(np.abs(t1.energy - t1.energy[0]))
    d2 = np.max(np.abs(t2.energy - t2.energy[0]))
    assert d2 < d1 / 3.5          # at least second-order energy convergence


def test_damped_excess_decays_monotonically():
    lat, table = cubic(6)
    params = ChainParams(T=1.0, sweeps=2500, burn_in=600, seed=52)
    stored, record = store_memory(lat, table, 0.1 * T_C, params)
    e_ref = total_energy(stored, table).total
    pulsed = recall_pulse(stored, [0], math.pi / 4,
                          order_direction=record.order_direction)
    traj = evolve_damped(pulsed, table, alpha=0.1, dt=0.01, steps=1500,
                         reference_energy=e_ref)
    sm = smoothed_excess(traj, window=10)
    assert np.all(np.diff(sm) <= 1e-12)
    assert traj.excess[0] > 0.0


def test_instability_detector_aborts_with_partial_trajectory():
    lat, table = cubic(4)
    cfg = reference_config(lat, "aligned")
    pulsed = recall_pulse(cfg, [0], math.pi / 4,
                          order_direction=np.array([0.0, 0.0, 1.0]))
    with pytest.raises(StepSizeError) as err:
        evolve_damped(pulsed, table, alpha=0.5, dt=5.0, steps=200)
    partial = err.value.trajectory
    assert partial is not None
    assert partial.n_frames >= 2
    assert partial.n_frames < 201


def test_evolve_validation():
    lat, table = cubic(4)
    cfg = reference_config(lat, "aligned")
    with pytest.raises(DomainError):
        evolve_damped(cfg, table, alpha=-0.1, dt=0.01, steps=10)
    with pytest.raises(DomainError):
        evolve_damped(cfg, table, alpha=0.0, dt=0.0, steps=10)
    with pytest.raises(DomainError):
        evolve_damped(cfg, table, alpha=0.0, dt=0.01, steps=0)


# --------------------------------------------------------------------------
# recall measurement

def synthetic_trajectory(excess, dt=0.05, m_final=(0.0, 0.0, 1.0)):
    n = len(excess)
    m = np.tile(np.asarray(m_final, dtype=float), (n, 1))
    return Trajectory(t=np.arange(n) * dt, energy=np.asarray(excess, dtype=float),
                      excess=np.asarray(excess, dtype=float), m=m, dt=dt,
                      alpha=0.1)


def test_measure_recall_exponential_decay():
    dt = 0.05
    t = np.arange(200) * dt
    traj = synthetic_trajectory(np.exp(-t / 2.0), dt=dt)
    record = MemoryRecord(order_direction=np.array([0.0, 0.0, 1.0]),
                          order_magnitude=1.0, T_store=0.1)
    report = measure_recall(traj, record)
    assert not report.no_decay
    assert report.decay_time == pytest.approx(2.0, abs=dt)
    assert report.direction_fidelity == pytest.approx(1.0)


def test_measure_recall_no_decay_for_conservative_run():
    traj = synthetic_trajectory(np.ones(150))
    record = MemoryRecord(order_direction=np.array([0.0, 0.0, 1.0]),
                          order_magnitude=1.0, T_store=0.1)
    report = measure_recall(traj, record)
    assert report.no_decay
    assert report.decay_time is None


def test_measure_recall_needs_frames():
    traj = synthetic_trajectory(np.ones(99))
    record = MemoryRecord(order_direction=np.array([0.0, 0.0, 1.0]),
                          order_magnitude=1.0, T_store=0.1)
    with pytest.raises(InsufficientDataError):
        measure_recall(traj, record)


def test_pulse_excess_matches_energy_delta_at_start():
    lat, table = cubic(6)
    params = ChainParams(T=1.0, sweeps=2000, burn_in=500, seed=53)
    stored, record = store_memory(lat, table, 0.1 * T_C, params)
    e_ref = total_energy(stored, table).total
    pulsed = recall_pulse(stored, [7], math.pi / 3,
                          order_direction=record.order_direction)
    de = energy_delta(stored, table, 7, pulsed.spins[7])
    traj = evolve_damped(pulsed, table, alpha=0.0, dt=0.01, steps=1,
                         reference_energy=e_ref)
    assert traj.excess[0] == pytest.approx(de, abs=1e-10)
