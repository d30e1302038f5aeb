import csv
import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from scrapopt import (
    DensityMatrix,
    NumericalError,
    PulseSet,
    Schedule,
    SystemParams,
    backward_costates,
    population_trace,
    propagate,
    reference_gaussian_pulses,
    sample_schedule,
    step_propagator,
)
from scrapopt.dynamics import check_states, eigensystem, expm_stack, taylor_expm, write_trace_csv
from tests.conftest import random_pulses

STANDARD = SystemParams(30.0, 45.0, 0.0)
RHO1 = DensityMatrix.projector(0).elements
RHO2 = DensityMatrix.projector(1).elements


def random_unitary(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3)))
    return q


def test_zero_hamiltonian_gives_identity():
    np.testing.assert_allclose(step_propagator(np.zeros((3, 3)), 0.1), np.eye(3), atol=1e-15)


def test_diagonal_hamiltonian():
    u = step_propagator(np.diag([0.0, 3.0, -7.0]), 0.2)
    np.testing.assert_allclose(u, np.diag(np.exp(-1j * 0.2 * np.array([0, 3, -7]))), atol=1e-14)


def test_decay_convention():
    u = step_propagator(np.diag([0, -0.5j * 2.0, 0]), 1.0)
    np.testing.assert_allclose(u, np.diag([1, math.exp(-1), 1]), atol=1e-14)
    rho = u @ RHO2 @ u.conj().T
    assert np.trace(rho).real == pytest.approx(math.exp(-2), rel=1e-13)


def test_step_propagator_rejects_bad_input():
    with pytest.raises(ValueError):
        step_propagator(np.eye(3), 0.0)
    with pytest.raises(ValueError):
        step_propagator(np.full((3, 3), np.nan), 0.1)


@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 0.1), st.floats(0, 3))
@settings(max_examples=50, deadline=None)
def test_eigen_exponential_matches_scipy(seed, dt, gamma):
    rng = np.random.default_rng(seed)
    h = rng.normal(scale=60, size=(3, 3))
    h = 0.5 * (h + h.T) + 0j
    h[1, 1] -= 0.5j * gamma
    u = step_propagator(h, dt)
    np.testing.assert_allclose(u, scipy.linalg.expm(-1j * dt * h), atol=1e-11)
    back = step_propagator(-h, dt)
    assert np.max(np.abs(u @ back - np.eye(3))) < 1e-10


def test_defective_generator_uses_series_fallback():
    jordan = np.array([[0.3, 1.0, 0.0], [0.0, 0.3, 0.0], [0.0, 0.0, -0.2]], dtype=complex)
    eig = eigensystem(jordan[None])
    assert eig.fallback[0]
    np.testing.assert_allclose(expm_stack(jordan[None])[0], scipy.linalg.expm(jordan), atol=1e-13)


def test_taylor_matches_scipy_for_large_norm():
    rng = np.random.default_rng(1)
    a = rng.normal(scale=5, size=(4, 3, 3)) + 1j * rng.normal(scale=5, size=(4, 3, 3))
    for m, u in zip(a, taylor_expm(a)):
        np.testing.assert_allclose(u, scipy.linalg.expm(m), rtol=1e-10, atol=1e-10)


def test_ground_state_is_stationary_without_fields():
    rec = propagate(RHO1, Schedule.zeros(800), STANDARD)
    np.testing.assert_allclose(rec.rho[-1], RHO1, atol=1e-14)
    np.testing.assert_array_equal(rec.rho[0], RHO1)


def test_excited_state_decays():
    params = SystemParams(30.0, 45.0, 1.0, t_start=-2.0, t_end=2.0, n_steps=400)
    rec = propagate(RHO2, Schedule.zeros(400), params)
    assert rec.final.trace == pytest.approx(math.exp(-4), abs=1e-6)


def test_schedule_length_must_match():
    with pytest.raises(ValueError):
        propagate(RHO1, Schedule.zeros(10), STANDARD)


def test_invalid_state_names_step():
    with pytest.raises(NumericalError) as err:
        propagate(np.diag([1.5, -0.5, 0]), Schedule.zeros(800), STANDARD)
    assert err.value.step == 0
    traj = np.broadcast_to(RHO1, (10, 3, 3)).copy()
    traj[6] = np.diag([1.0, 0.5, 0.0])
    with pytest.raises(NumericalError, match="step 6"):
        check_states(traj)


def standard_record(gamma=0.0, n_steps=800):
    params = SystemParams(30.0, 45.0, gamma, n_steps=n_steps)
    return propagate(RHO1, sample_schedule(reference_gaussian_pulses(), params), params)


def test_standard_transfer():
    rec = standard_record()
    assert rec.populations[-1, 2] >= 0.9
    assert rec.populations[-1, 0] <= 0.05


def test_standard_population_trace():
    table = population_trace(standard_record())
    t, p1, p2, p3 = table.T
    assert table.shape == (801, 4)
    assert p3[0] == 0 and p3[-1] >= 0.9
    assert -3.0 <= t[np.argmax(p2)] <= 0.0
    assert p2.max() > 1e-2
    assert p2[-1] < 1e-6


def test_standard_with_decay_leaks_monotonically():
    table = population_trace(standard_record(gamma=1.0))
    total = table[:, 1:].sum(axis=1)
    steps = np.diff(total)
    active = table[1:, 2] > 1e-8
    assert np.all(steps[active] < 0)
    assert np.all(steps <= 1e-12)


def test_zero_field_trace_column():
    table = population_trace(propagate(RHO1, Schedule.zeros(800), STANDARD))
    np.testing.assert_array_equal(table[:, 1], 1.0)


def test_costates_with_identity_propagators():
    c = DensityMatrix.projector(2).elements
    lam = backward_costates(c, np.broadcast_to(np.eye(3), (5, 3, 3)))
    assert lam.shape == (6, 3, 3)
    for m in lam:
        np.testing.assert_array_equal(m, c)
    lam1 = backward_costates(c, np.eye(3)[None])
    np.testing.assert_array_equal(lam1[-1], c)


def test_performance_index_is_step_invariant_without_loss():
    rng = np.random.default_rng(7)
    u = np.stack([random_unitary(rng) for _ in range(30)])
    from scrapopt.dynamics import forward_states

    rho = forward_states(RHO1, u)
    c = DensityMatrix.projector(2).elements
    lam = backward_costates(c, u)
    overlaps = np.real(np.einsum("jab,jba->j", lam, rho))
    np.testing.assert_allclose(overlaps, overlaps[-1], atol=1e-9)
    assert np.max(np.abs(lam - np.swapaxes(lam, -1, -2).conj())) < 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_conservation_for_random_schedules(seed):
    rng = np.random.default_rng(seed)
    params = SystemParams(*rng.uniform([5, 50], [60, 150]), gamma=0.0)
    rec = propagate(RHO1, sample_schedule(random_pulses(rng, params), params), params)
    assert abs(rec.final.trace - 1) < 1e-9
    drift = np.max(np.abs(rec.rho - np.swapaxes(rec.rho, -1, -2).conj()))
    assert drift < 1e-11


def test_two_halves_compose():
    params = SystemParams(30, 45, 1.0)
    sched = sample_schedule(reference_gaussian_pulses(), params)
    full = propagate(RHO1, sched, params)
    arr = sched.as_array()
    first = SystemParams(30, 45, 1.0, t_start=-4, t_end=0, n_steps=400)
    second = SystemParams(30, 45, 1.0, t_start=0, t_end=4, n_steps=400)
    mid = propagate(RHO1, Schedule.from_array(arr[:, :400]), first)
    end = propagate(mid.rho[-1], Schedule.from_array(arr[:, 400:]), second)
    np.testing.assert_allclose(end.rho[-1], full.rho[-1], atol=1e-10)


def test_step_doubling_is_second_order():
    phi = [standard_record(n_steps=n).populations[-1, 2] for n in (800, 1600, 3200)]
    ratio = (phi[0] - phi[1]) / (phi[1] - phi[2])
    assert 3 <= ratio <= 5


def test_trace_csv(tmp_path):
    table = population_trace(standard_record())
    path = tmp_path / "trace.csv"
    write_trace_csv(path, table)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "p1", "p2", "p3"]
    assert len(rows) == 802
    back = np.array(rows[1:], dtype=float)
    np.testing.assert_array_equal(back, table)
