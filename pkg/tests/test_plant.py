import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from neursls.plant import (DisturbanceModel, Drag, LinearPlant, VehicleParams, VehiclePlant, base_control,
                           reconstruct_disturbance, sample_disturbances, vehicle_base_controller, vehicle_step,
                           vehicle_step_vjp)
from neursls.signals import Signal, check_causality


def params(N=1, drag=None, ts=0.05, mass=1.0, gains=(1.0, 1.0), targets=None):
    drag = drag or Drag("nonlinear", b1=0.5, b2=0.3)
    targets = np.zeros((N, 2)) if targets is None else targets
    return VehicleParams(targets=targets, mass=mass, ts=ts, drag=drag, base_gains=np.array(gains))


def step_oracle(p: VehicleParams, x, u):
    """Agent-by-agent loop written from the point-mass equations."""
    out = np.array(x, dtype=float)
    b1, b2 = p.drag.coefficients
    for i in range(p.count):
        pos, vel = x[4 * i:4 * i + 2], x[4 * i + 2:4 * i + 4]
        force = u[2 * i:2 * i + 2]
        drag = b1 * vel + b2 * np.sqrt(vel @ vel) * vel
        out[4 * i:4 * i + 2] = pos + p.ts * vel
        out[4 * i + 2:4 * i + 4] = vel + p.ts / p.mass * (-drag + force)
    return out


# -- vehicle step --------------------------------------------------------------------

def test_rest_is_equilibrium():
    p = params(N=2)
    x = np.array([1.0, 2.0, 0.0, 0.0, -3.0, 0.5, 0.0, 0.0])
    np.testing.assert_array_equal(vehicle_step(p, x, np.zeros(4)), x)


def test_linear_drag_hand_value():
    p = params(drag=Drag("linear", b=1.0))
    out = vehicle_step(p, np.array([0.0, 0.0, 1.0, 0.0]), np.zeros(2))
    np.testing.assert_allclose(out, [0.05, 0.0, 0.95, 0.0], atol=1e-15)


def test_quadratic_drag_hand_value():
    p = params(drag=Drag("nonlinear", b1=0.0, b2=1.0), ts=0.1)
    out = vehicle_step(p, np.array([0.0, 0.0, 3.0, 4.0]), np.zeros(2))
    np.testing.assert_allclose(out[2:], [1.5, 2.0], atol=1e-14)


def test_step_matches_loop_oracle(rng):
    p = params(N=3, mass=1.7)
    x, u = rng.normal(size=12), rng.normal(size=6)
    np.testing.assert_allclose(vehicle_step(p, x, u), step_oracle(p, x, u), atol=1e-14)


def test_step_rejects_bad_shapes():
    with pytest.raises(ValueError):
        vehicle_step(params(N=2), np.zeros(4), np.zeros(4))


@pytest.mark.parametrize("kw", [dict(ts=0.0), dict(mass=-1.0), dict(gains=(0.0, 1.0))])
def test_params_validated(kw):
    with pytest.raises(ValueError):
        params(**kw)


def test_negative_drag_rejected():
    with pytest.raises(ValueError):
        Drag("linear", b=-0.1)
    with pytest.raises(ValueError):
        Drag("cubic")


def test_drag_dict_round_trip():
    for d in (Drag("linear", b=0.7), Drag("nonlinear", b1=0.2, b2=0.1)):
        assert Drag.from_dict(d.to_dict()) == d


@pytest.mark.parametrize("drag", [Drag("linear", b=0.8), Drag("nonlinear", b1=0.4, b2=0.6)])
def test_step_vjp_matches_finite_differences(rng, drag):
    p = params(N=2, drag=drag)
    x, u, adj = rng.normal(size=8), rng.normal(size=4), rng.normal(size=8)
    gx, gu = vehicle_step_vjp(p, x, u, adj)
    h = 1e-6
    for i in range(8):
        e = np.zeros(8)
        e[i] = h
        num = adj @ (vehicle_step(p, x + e, u) - vehicle_step(p, x - e, u)) / (2 * h)
        assert gx[i] == pytest.approx(num, rel=1e-7, abs=1e-9)
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        num = adj @ (vehicle_step(p, x, u + e) - vehicle_step(p, x, u - e)) / (2 * h)
        assert gu[i] == pytest.approx(num, rel=1e-7, abs=1e-9)


def test_drag_jacobian_at_rest_uses_linear_part():
    p = params(drag=Drag("nonlinear", b1=0.4, b2=0.6))
    adj = np.array([0.0, 0.0, 1.0, 0.0])
    gx, _ = vehicle_step_vjp(p, np.zeros(4), np.zeros(2), adj)
    # d q_next / d q at q = 0 is (1 - ts b1 / m) I
    assert gx[2] == pytest.approx(1 - 0.05 * 0.4)
    assert np.all(np.isfinite(gx))


def test_plant_operator_is_strictly_causal():
    plant = VehiclePlant(params(N=2))
    F = plant.as_operator()
    assert check_causality(F, trials=50, horizon=12).passed
    s = Signal(np.random.default_rng(0).normal(size=(6, 12)))
    # first entry of F(x, u) is zero and entry t uses only steps < t
    assert np.all(F(s)[0] == 0)
    shifted = s.data.copy()
    shifted[3] += 1.0
    np.testing.assert_array_equal(F(Signal(shifted)).data[:4], F(s).data[:4])


def test_history_requirement():
    plant = VehiclePlant(params())
    with pytest.raises(ValueError):
        plant.f(3, np.zeros((2, 4)), np.zeros((2, 2)))


# -- base controller -------------------------------------------------------------------

def test_base_control_zero_at_target():
    p = params(N=2, targets=np.array([[1.0, 2.0], [-1.0, 0.5]]))
    assert np.all(base_control(p, p.setpoint) == 0)


def test_base_control_diagonal_product():
    p = params(gains=(1.0, 2.0), targets=np.array([[3.0, -1.0]]))
    np.testing.assert_array_equal(base_control(p, np.zeros(4)), [3.0, -2.0])


def test_base_control_matches_elementwise_oracle(rng):
    N = 3
    gains = rng.uniform(0.5, 2.0, size=(N, 2))
    p = VehicleParams(targets=rng.normal(size=(N, 2)), mass=1.0, ts=0.05, drag=Drag("linear", b=1.0),
                      base_gains=gains)
    x = rng.normal(size=(7, 4 * N))
    want = np.stack([np.concatenate([gains[i] * (p.targets[i] - xk[4 * i:4 * i + 2]) for i in range(N)])
                     for xk in x])
    np.testing.assert_allclose(base_control(p, x), want, rtol=0, atol=1e-15)
    np.testing.assert_allclose(vehicle_base_controller(p).control(x), want, rtol=0, atol=1e-15)


@given(arrays(float, 2, elements=st.floats(-3, 3)), arrays(float, 2, elements=st.floats(-2, 2)))
def test_base_loop_settles(p0, q0):
    """Unforced base loop from a bounded ball decays to the target."""
    p = params(drag=Drag("nonlinear", b1=1.0, b2=0.5), gains=(1.0, 1.0), targets=np.array([[0.5, -0.5]]))
    K = vehicle_base_controller(p)
    x = np.concatenate([p0, q0])
    for _ in range(600):
        x = vehicle_step(p, x, K.control(x))
    assert np.linalg.norm(x[:2] - p.targets[0]) < 1e-3 and np.linalg.norm(x[2:]) < 1e-3


@given(arrays(float, 2, elements=st.floats(-5, 5)))
def test_unforced_speed_never_grows(q0):
    p = params(drag=Drag("nonlinear", b1=0.2, b2=0.1))
    x = np.concatenate([[0.0, 0.0], q0])
    speed = np.linalg.norm(q0)
    for _ in range(100):
        x = vehicle_step(p, x, np.zeros(2))
        new = np.linalg.norm(x[2:])
        assert new <= speed + 1e-12
        speed = new


# -- disturbance reconstruction ----------------------------------------------------------

def closed_loop(plant, K, w):
    T1 = len(w)
    x, u = np.zeros((T1, plant.state_dim)), np.zeros((T1, plant.input_dim))
    for t in range(T1):
        x[t] = w[0] if t == 0 else plant.dynamics(x[t - 1], u[t - 1]) + w[t]
        u[t] = K.control(x[t])
    return x, u


def test_reconstruction_at_zero_returns_initial_state(rng):
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(reconstruct_disturbance(VehiclePlant(params()), x, np.zeros((3, 2)), 0), x[0])


def test_noiseless_rollout_reconstructs_zero():
    p = params()
    plant = VehiclePlant(p)
    w = np.zeros((30, 4))
    w[0] = [1.0, -1.0, 0.3, 0.0]
    x, u = closed_loop(plant, vehicle_base_controller(p), w)
    for t in range(1, 30):
        assert np.abs(reconstruct_disturbance(plant, x, u, t)).max() <= 1e-12


def test_reconstruction_recovers_injected_noise(rng):
    p = params(N=2)
    plant = VehiclePlant(p)
    w = rng.normal(scale=0.3, size=(40, 8))
    x, u = closed_loop(plant, vehicle_base_controller(p), w)
    for t in range(40):
        np.testing.assert_allclose(reconstruct_disturbance(plant, Signal(x), Signal(u), t), w[t], atol=1e-10)


def test_reconstruction_needs_history():
    with pytest.raises(ValueError):
        reconstruct_disturbance(VehiclePlant(params()), np.zeros((2, 4)), np.zeros((2, 2)), 5)


def test_linear_plant_shapes():
    with pytest.raises(ValueError):
        LinearPlant(np.eye(2), np.ones((3, 1)))


# -- disturbance sampling -----------------------------------------------------------------

def test_zero_covariance_returns_mean():
    m = DisturbanceModel(mean0=[1.0, 2.0], cov0=np.zeros((2, 2)))
    w = m.sample(4, 5, 0)
    assert np.all(w[:, 0] == [1.0, 2.0]) and np.all(w[:, 1:] == 0)


def test_sampler_is_deterministic():
    m = DisturbanceModel(mean0=[0.0, 0.0], cov0=np.eye(2), cov=0.1 * np.eye(2))
    np.testing.assert_array_equal(m.sample(3, 7, 42), m.sample(3, 7, 42))
    a = sample_disturbances(m, 2, 4, 9)
    b = sample_disturbances(m, 2, 4, 9)
    assert a == b and a[0].horizon == 5


def test_sample_mean_law_of_large_numbers():
    mu = np.array([1.0, -2.0, 0.5])
    sd = np.array([0.5, 1.0, 2.0])
    m = DisturbanceModel(mean0=mu, cov0=np.diag(sd**2))
    w0 = m.sample(10_000, 0, 7)[:, 0]
    assert np.all(np.abs(w0.mean(axis=0) - mu) <= 3 * sd / 100)


@pytest.mark.parametrize("cov", [np.array([[1.0, 2.0], [2.0, 1.0]]), np.array([[1.0, 0.5], [0.0, 1.0]])])
def test_rejects_invalid_covariance(cov):
    with pytest.raises(ValueError):
        DisturbanceModel(mean0=[0.0, 0.0], cov0=cov)


def test_rejects_empty_batch():
    with pytest.raises(ValueError):
        DisturbanceModel(mean0=[0.0], cov0=[[1.0]]).sample(0, 3)
