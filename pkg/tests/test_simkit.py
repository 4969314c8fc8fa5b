import math

import numpy as np
import pytest

from isps import simkit
from isps.sfsys import Box, StrictFeedbackSystem, maglev_system, twolink_system
from isps.simkit import DataGenConfig, PiecewiseConstant, SimConfig

from conftest import chain_controller, chain_system


def test_zero_field_is_constant():
    for method in ("rk4", "euler"):
        t, x = simkit.integrate_field(lambda t, x: np.zeros_like(x), [1.0, -2.0], 1.0, 0.1, method)
        assert np.all(x == np.array([1.0, -2.0]))
        assert len(t) == 11


def test_rk4_exponential_decay():
    _, x = simkit.integrate_field(lambda t, x: -x, [1.0], 1.0, 0.01)
    assert abs(x[-1, 0] - math.exp(-1)) < 1e-9


def test_rk4_convergence_order():
    errs = []
    for dt in (0.1, 0.05, 0.025):
        _, x = simkit.integrate_field(lambda t, x: -x, [1.0], 1.0, dt)
        errs.append(abs(x[-1, 0] - math.exp(-1)))
    orders = [math.log2(a / b) for a, b in zip(errs, errs[1:])]
    assert all(3.8 <= p <= 4.2 for p in orders)


def test_euler_is_first_order():
    errs = []
    for dt in (0.01, 0.005):
        _, x = simkit.integrate_field(lambda t, x: -x, [1.0], 1.0, dt, "euler")
        errs.append(abs(x[-1, 0] - math.exp(-1)))
    assert 0.9 <= math.log2(errs[0] / errs[1]) <= 1.1


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(1.0, 0.0)
    with pytest.raises(ValueError):
        SimConfig(1.0, 2.0)
    with pytest.raises(ValueError):
        SimConfig(1.0, 0.1, method="dopri")
    assert SimConfig(10.0, 1e-3).steps == 10000


def test_identical_pair_is_bitwise_identical():
    ctrl = chain_controller(2, (1.5, 3.0))
    pair = simkit.simulate_pair(ctrl.system, ctrl, [1.0, 0.0], [1.0, 0.0], [0.2], [0.2], SimConfig(1.0, 1e-2))
    assert np.array_equal(pair.x, pair.x_prime)
    again = simkit.simulate_pair(ctrl.system, ctrl, [1.0, 0.0], [1.0, 0.0], [0.2], [0.2], SimConfig(1.0, 1e-2))
    assert np.array_equal(again.x, pair.x)


def test_open_loop_integration_uses_input():
    s = chain_system(1, input_gain=2.0)
    traj = simkit.integrate(s, None, [0.0], [1.5], SimConfig(1.0, 1e-2))
    assert traj.states[-1, 0] == pytest.approx(3.0, rel=1e-12)
    assert np.all(traj.inputs == 1.5)


def test_initial_state_outside_domain():
    s = chain_system(1, half_width=1.0)
    with pytest.raises(ValueError, match="outside"):
        simkit.integrate(s, None, [2.0], [0.0], SimConfig(0.1, 1e-2))
    traj = simkit.integrate(s, None, [2.0], [0.0], SimConfig(0.1, 1e-2, allow_initial_outside=True))
    assert traj.domain_exits == 10


def test_clamping_counts_events():
    s = chain_system(1, half_width=1.0)
    cfg = SimConfig(1.0, 0.1, clamp_to_domain=True)
    traj = simkit.integrate(s, None, [0.5], [1.0], cfg)
    assert traj.states.max() <= 1.0
    assert traj.clamp_events > 0 and traj.clamp_events == traj.domain_exits


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_state_reports_time():
    box = Box((-10.0,), (10.0,))
    s = StrictFeedbackSystem(1, 1, (lambda nu: np.array([nu[0] ** 3]),), (), 1.0, box)
    with pytest.raises(simkit.SimulationError) as info:
        simkit.integrate(s, None, [5.0], [0.0], SimConfig(5.0, 0.05))
    assert 0 < info.value.time < 5.0


def test_piecewise_constant_signal():
    u = PiecewiseConstant([0.0, 1.0, 2.5], [[1.0], [-1.0], [3.0]])
    assert u(-1.0)[0] == 1.0 and u(0.99)[0] == 1.0 and u(1.0)[0] == -1.0 and u(10.0)[0] == 3.0
    assert u.sup_distance(PiecewiseConstant.constant([0.0])) == 3.0
    with pytest.raises(ValueError):
        PiecewiseConstant([1.0, 0.0], [[0.0], [1.0]])
    with pytest.raises(TypeError):
        simkit.as_signal(lambda t: t)


def test_maglev_case_study_pair_runs():
    ctrl_sys = maglev_system()
    pair = simkit.simulate_pair(ctrl_sys, None, [1.5, 0.5, 7.0], [2.5, -0.5, 2.0], [0.0], [0.0],
                                SimConfig(0.05, 1e-3))
    assert pair.x.shape == (51, 3) and pair.first.clamp_events == 0


def test_trajectory_csv_round_trip(tmp_path):
    ctrl = chain_controller(2, (1.5, 3.0))
    traj = simkit.integrate(ctrl.system, ctrl, [1.0, -0.5], [0.3], SimConfig(0.2, 1e-2))
    p = tmp_path / "t.csv"
    simkit.write_trajectory_csv(traj, p)
    assert p.read_text().splitlines()[0] == "t,x1,x2,u1,uhat1"
    back = simkit.read_trajectory_csv(p)
    np.testing.assert_array_equal(back.states, traj.states)
    np.testing.assert_array_equal(back.inputs, traj.inputs)
    np.testing.assert_array_equal(back.times, traj.times)


# --- training data -----------------------------------------------------------

@pytest.mark.parametrize("kind, N", [("maglev", 200), ("twolink", 400)])
def test_noiseless_targets_equal_drift(kind, N):
    s = maglev_system() if kind == "maglev" else twolink_system()
    for i in range(1, s.h + 1):
        ds = simkit.generate_dataset(s, i, DataGenConfig(samples=N, noise_std=0.0, seed=1))
        assert ds.size == N and ds.input_dim == i * s.n
        f = np.array([s.drift(i, x) for x in ds.inputs])
        assert np.all(np.abs(ds.targets - f) <= 1e-12 * np.maximum(1.0, np.abs(f)))


def test_dataset_generation_is_seeded():
    s = maglev_system()
    cfg = DataGenConfig(samples=50, noise_std=0.01, seed=4)
    a = simkit.generate_dataset(s, 3, cfg)
    b = simkit.generate_dataset(s, 3, cfg)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.targets, b.targets)
    c = simkit.generate_dataset(s, 3, DataGenConfig(samples=50, noise_std=0.01, seed=5))
    assert not np.array_equal(a.inputs, c.inputs)
    assert np.all(a.inputs[:, 2] >= 1e-6)


def test_noise_level_is_respected():
    s = chain_system(2)
    ds = simkit.generate_dataset(s, 2, DataGenConfig(samples=4000, noise_std=0.05, seed=0))
    assert np.std(ds.targets) == pytest.approx(0.05, rel=0.05)
    assert abs(np.mean(ds.targets)) < 0.005


def test_finite_difference_targets_close_to_exact():
    box = Box((-2.0,), (2.0,))
    s = StrictFeedbackSystem(1, 1, (lambda nu: np.array([np.sin(nu[0])]),), (), 1.0, box)
    tau = 1e-4
    ex = simkit.generate_dataset(s, 1, DataGenConfig(samples=100, noise_std=0.0, seed=2))
    fd = simkit.generate_dataset(s, 1, DataGenConfig(samples=100, noise_std=0.0, seed=2,
                                                     derivative_mode="finite-difference", sampling_time=tau))
    # |f'| <= 1 on the box
    assert np.max(np.abs(fd.targets - ex.targets)) <= 10 * tau * 1.0


def test_datagen_config_validation():
    with pytest.raises(ValueError):
        DataGenConfig(samples=0)
    with pytest.raises(ValueError):
        DataGenConfig(derivative_mode="finite-difference", sampling_time=0.0)
    with pytest.raises(ValueError):
        simkit.generate_dataset(chain_system(2), 3, DataGenConfig())
