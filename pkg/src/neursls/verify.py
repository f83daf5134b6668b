"""Seeded property suites: contraction, gradients, completeness, Youla, achievability.

Each suite builds its own instances from a seed and returns a :class:`SuiteResult`.
The same functions back the ``verify`` command and the acceptance tests.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import evaluate
from .plant import Drag, LinearFeedback, LinearPlant, VehicleParams, VehiclePlant, vehicle_base_controller
from .ren import (RenDims, RenOperator, RenTheta, contraction_certificate, init_theta, ren_backward,
                  ren_forward_batch, theta_shapes, theta_to_weights)
from .signals import Signal, ZeroOperator
from .sls import (FirOperator, NeurSlsController, check_achievability, closed_loop_maps,
                  completeness_construct, rollout, youla_q_rollout, youla_rollout)
from .training import LossWeights, Problem, StageLoss, gradcheck


@dataclass
class SuiteResult:
    name: str
    passed: bool
    summary: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        items = ", ".join(f"{k}={_fmt(v)}" for k, v in self.summary.items())
        return f"[{status}] {self.name} ({self.seconds:.1f}s) {items}"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.3g}"
    return str(v)


def random_theta(dims: RenDims, rng, scale: float = 1.0, epsilon: float = 1e-3) -> RenTheta:
    """Every free block drawn i.i.d. ``N(0, scale^2)``; stresses the parametrization."""
    blocks = {k: scale * rng.standard_normal(shape) for k, shape in theta_shapes(dims).items()}
    return RenTheta(epsilon=epsilon, **blocks)


# -- contraction -----------------------------------------------------------------

def contraction(n_theta: int = 100, pairs: int = 10, horizon: int = 50, seed: int = 0) -> SuiteResult:
    """Incremental energy decay for random REN parameters of random sizes."""
    rng = np.random.default_rng(seed)
    violations, failed = 0, []
    for k in range(n_theta):
        dims = RenDims(q=int(rng.integers(1, 11)), r=int(rng.integers(1, 11)),
                       n=int(rng.integers(1, 5)), m=int(rng.integers(1, 4)))
        theta = random_theta(dims, rng, scale=float(rng.uniform(0.1, 3.0)))
        sigma = "tanh" if k % 2 == 0 else "relu"
        rep = contraction_certificate(theta_to_weights(theta), trials=pairs, horizon=horizon,
                                      seed=int(rng.integers(2**31)), sigma=sigma)
        violations += rep.violations
        if not rep.passed:
            failed.append(k)
    return SuiteResult("contraction", violations == 0,
                       {"instances": n_theta, "pairs": pairs, "violations": violations, "failed": failed[:5]})


# -- gradients -------------------------------------------------------------------

def gradcheck_problem(horizon: int = 10, q: int = 4, r: int = 4):
    """1-agent vehicle with nonlinear drag and an obstacle bump near its path."""
    params = VehicleParams(targets=np.array([[1.0, 0.5]]), mass=1.0, ts=0.05,
                           drag=Drag("nonlinear", b1=0.5, b2=0.3), base_gains=np.array([1.0, 1.0]))
    weights = LossWeights(Q_diag=[1, 1, 0.5, 0.5, 0.1, 0.1], alpha_obs=5.0,
                          obstacles=[dict(center=[0.0, 0.0], width=0.8)])
    plant = VehiclePlant(params)
    loss = StageLoss(weights, params.setpoint, 2, agents=1)
    problem = Problem(plant, vehicle_base_controller(params), loss, RenDims(q=q, r=r, n=4, m=2))
    return problem


def ren_gradcheck(dims: RenDims, horizon: int = 10, batch: int = 3, seed: int = 0, step: float = 1e-6,
                  atol: float = 1e-8, sigma: str = "tanh") -> float:
    """Max relative error of the REN-only gradient of ``sum_t (|u_t|^2/2 + c.u_t)``."""
    rng = np.random.default_rng(seed)
    theta = init_theta(dims, rng, out_std=0.5)
    w = rng.normal(size=(batch, horizon + 1, dims.n))
    c = rng.normal(size=dims.m)

    def value(th):
        tr = ren_forward_batch(theta_to_weights(th), w, sigma)
        return float(np.sum(0.5 * tr.u**2) + np.sum(tr.u @ c))

    weights = theta_to_weights(theta)
    tr = ren_forward_batch(weights, w, sigma)
    g = ren_backward(weights, theta, tr, tr.u + c).flat()
    x0 = theta.flat()
    worst = 0.0
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e[i] = step
        num = (value(RenTheta.from_flat(dims, x0 + e, theta.epsilon))
               - value(RenTheta.from_flat(dims, x0 - e, theta.epsilon))) / (2 * step)
        worst = max(worst, abs(g[i] - num) / max(abs(g[i]), abs(num), atol))
    return worst


def gradients(seed: int = 0, loop_tol: float = 1e-4, ren_tol: float = 1e-5) -> SuiteResult:
    problem = gradcheck_problem()
    rng = np.random.default_rng(seed)
    theta = init_theta(problem.ren_dims, rng, out_std=0.5)
    x0 = np.array([-1.0, -0.8, 0.0, 0.0])
    w = np.zeros((2, 11, 4))
    w[:, 0] = x0 + 0.1 * rng.standard_normal((2, 4))
    w[:, 1:] = 0.01 * rng.standard_normal((2, 10, 4))
    rep = gradcheck(theta, problem, w, tolerance=loop_tol)
    ren_err = ren_gradcheck(RenDims(q=4, r=4, n=4, m=2), seed=seed)
    return SuiteResult("gradcheck", rep.passed and ren_err <= ren_tol,
                       {"loop_max_rel": rep.max_rel_error, "loop_coords": rep.checked,
                        "worst_block": rep.worst_block, "ren_max_rel": ren_err})


# -- completeness ----------------------------------------------------------------

LIN_A = np.array([[1.0, 0.1], [0.0, 1.0]])
LIN_B = np.array([[0.005], [0.1]])
LIN_K = np.array([[-3.0, -4.0]])
LIN_K_REF = np.array([[-5.0, -5.0]])


def _max_trace_error(a, b) -> float:
    return max(float(np.abs(a.x.data - b.x.data).max()), float(np.abs(a.u.data - b.u.data).max()))


def completeness_errors(reference: NeurSlsController, base, ws) -> list[float]:
    """Rebuild the reference loop as ``base + M`` and compare traces for each ``w``."""
    psi_x, psi_u = closed_loop_maps(reference)
    emme = completeness_construct(base, psi_x, psi_u)
    ctrl = NeurSlsController(base, emme, reference.plant)
    return [_max_trace_error(rollout(ctrl, w), rollout(reference, w)) for w in ws]


def completeness(seeds: int = 10, horizon: int = 50, seed: int = 0, tol: float = 1e-8) -> SuiteResult:
    rng = np.random.default_rng(seed)
    lin = LinearPlant(LIN_A, LIN_B)
    ref = NeurSlsController(LinearFeedback(LIN_K_REF), ZeroOperator(2, 1), lin)
    lin_w = [Signal(rng.normal(size=(horizon + 1, 2))) for _ in range(seeds)]
    lin_err = max(completeness_errors(ref, LinearFeedback(LIN_K), lin_w))

    params = VehicleParams(targets=np.array([[0.0, 0.0]]), mass=1.0, ts=0.05,
                           drag=Drag("nonlinear", b1=1.0, b2=0.5), base_gains=np.array([1.0, 1.0]))
    veh = VehiclePlant(params)
    base = vehicle_base_controller(params)
    theta = init_theta(RenDims(q=4, r=4, n=4, m=2), rng, out_std=0.2)
    vref = NeurSlsController(base, RenOperator(theta), veh)
    veh_w = []
    for _ in range(seeds):
        w = 0.01 * rng.normal(size=(horizon + 1, 4))
        w[0] = np.r_[rng.uniform(-2, 2, 2), 0.0, 0.0]
        veh_w.append(Signal(w))
    veh_err = max(completeness_errors(vref, base, veh_w))
    return SuiteResult("completeness", lin_err <= tol and veh_err <= tol,
                       {"linear_max_err": lin_err, "vehicle_max_err": veh_err, "tol": tol})


# -- Youla -----------------------------------------------------------------------

def youla_errors(A, B, K, Q, ws) -> list[float]:
    """Free-operator loop with ``M = Q - K'`` against the classical ``Q`` loop."""
    Qf = Q if isinstance(Q, FirOperator) else FirOperator([Q])
    M = Qf - FirOperator([np.atleast_2d(K)])
    return [_max_trace_error(youla_rollout(A, B, K, M, w), youla_q_rollout(A, B, K, Qf, w)) for w in ws]


def youla(horizon: int = 100, samples: int = 5, seed: int = 0, tol: float = 1e-10) -> SuiteResult:
    rng = np.random.default_rng(seed)
    # deadbeat scalar loop: an impulse dies after one step
    imp = np.zeros((horizon + 1, 1))
    imp[0] = 1.0
    r = youla_rollout([[0.5]], [[1.0]], [[-0.5]], ZeroOperator(1, 1), Signal(imp))
    want = np.zeros(horizon + 1)
    want[0] = 1.0
    deadbeat = float(np.abs(r.x.data[:, 0] - want).max())

    ws1 = [Signal(rng.normal(size=(horizon + 1, 1))) for _ in range(samples)]
    scalar = max(youla_errors([[0.5]], [[1.0]], [[-0.5]], [[-0.2]], ws1))
    ws2 = [Signal(rng.normal(size=(horizon + 1, 2))) for _ in range(samples)]
    two = max(youla_errors(LIN_A, LIN_B, LIN_K, LIN_K_REF, ws2))
    fir_q = FirOperator([LIN_K_REF, 0.3 * LIN_K_REF, -0.1 * LIN_K_REF])
    fir = max(youla_errors(LIN_A, LIN_B, LIN_K, fir_q, ws2))
    worst = max(scalar, two, fir)
    return SuiteResult("youla", deadbeat <= tol and worst <= tol,
                       {"deadbeat_err": deadbeat, "scalar_err": scalar, "two_state_err": two,
                        "fir_err": fir, "tol": tol})


# -- achievability ---------------------------------------------------------------

def rollout_residual(r, plant) -> float:
    """Max over ``t`` of ``|x_t - f_t(x, u) - w_t|`` for a finished rollout."""
    rep = check_achievability(lambda _: r.x, lambda _: r.u, plant, [r.w], tol=np.inf)
    return rep.max_error


def achievability(n_rollouts: int = 100, horizon: int = 100, seed: int = 0, tol: float = 1e-10) -> SuiteResult:
    from .scenario import load

    rng = np.random.default_rng(seed)
    scen = load("mountains")
    lin = LinearPlant(LIN_A, LIN_B)
    worst = 0.0
    for k in range(n_rollouts):
        if k % 2 == 0:
            theta = init_theta(scen.ren_dims, rng, out_std=float(rng.uniform(0.05, 1.0)))
            src = "injected" if k % 4 == 0 else "reconstructed"
            ctrl = evaluate.controller(scen, theta, w_source=src)
            w = scen.sample(1, horizon, rng)[0]
            w[1:] += 0.01 * rng.standard_normal(w[1:].shape)
            plant = ctrl.plant
        else:
            taps = [rng.normal(scale=0.5, size=(1, 2)) for _ in range(3)]
            ctrl = NeurSlsController(LinearFeedback(LIN_K), FirOperator(taps), lin,
                                     w_source="injected" if k % 4 == 1 else "reconstructed")
            w = rng.normal(size=(horizon + 1, 2))
            plant = lin
        worst = max(worst, rollout_residual(rollout(ctrl, Signal(w)), plant))
    return SuiteResult("achievability", worst <= tol, {"rollouts": n_rollouts, "max_residual": worst, "tol": tol})


# -- stability by design -----------------------------------------------------------

def stability_by_design(scenario, n_theta: int = 20, horizon_mult: int = 10, conv_steps: int = 500,
                        seed: int = 0, bound: float = 1e3, inc_tol: float = 1e-3) -> SuiteResult:
    """Untrained random REN parameters: bounded long rollouts and converging cumulative loss."""
    rng = np.random.default_rng(seed)
    T_long = max(horizon_mult * scenario.horizon, conv_steps)
    peak, inc_max = 0.0, 0.0
    for _ in range(n_theta):
        theta = init_theta(scenario.ren_dims, rng, scenario.epsilon, out_std=float(rng.uniform(0.05, 1.0)))
        w = scenario.sample(1, T_long, rng)
        x, u, _ = evaluate.simulate(scenario, theta, w, scenario.activation)
        peak = max(peak, float(np.abs(x).max()))
        cum = evaluate.cumulative_loss(scenario, x[:, : conv_steps + 1], u[:, : conv_steps + 1])
        inc_max = max(inc_max, float(evaluate.convergence_increment(cum).max()))
    return SuiteResult("stability", peak <= bound and inc_max <= inc_tol,
                       {"instances": n_theta, "peak_state": peak, "max_increment": inc_max})


SUITES: dict[str, Callable[..., SuiteResult]] = {
    "contraction": contraction,
    "gradcheck": gradients,
    "completeness": completeness,
    "youla": youla,
    "achievability": achievability,
}


def run(name: str, seed: int = 0) -> list[SuiteResult]:
    """Run one suite (or ``all``) and time each."""
    names = list(SUITES) if name == "all" else [name]
    if any(n not in SUITES for n in names):
        raise KeyError(name)
    out = []
    for n in names:
        tic = time.perf_counter()
        res = SUITES[n](seed=seed)
        res.seconds = time.perf_counter() - tic
        out.append(res)
    return out
