"""Learning the free operator: stage losses, batch objective, exact gradients, training.

The objective is the empirical mean over a batch of disturbances of the summed
stage loss along closed-loop rollouts with ``M = REN[theta]``. Training runs with
injected disturbances, so the REN output is computed once from ``w`` and the
reverse sweep goes plant -> base controller -> REN.
"""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .ren import RenDims, RenTheta, init_theta, ren_backward, ren_forward_batch, save_checkpoint, theta_to_weights

log = logging.getLogger(__name__)


@dataclass
class Obstacle:
    center: np.ndarray
    width: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if not self.width > 0:
            raise ValueError("obstacle width must be positive")


@dataclass
class LossWeights:
    """Weights of the stage loss ``l = l_traj + l_ca + l_obs``.

    ``Q_diag`` weighs ``[x - x_bar; u]``; a 6-vector is read as a per-agent
    pattern ``(px, py, qx, qy, ux, uy)`` and tiled over agents.
    """

    Q_diag: np.ndarray
    alpha_ca: float = 0.0
    alpha_obs: float = 0.0
    safety_distance: float = 1.0
    obstacles: list = field(default_factory=list)

    def __post_init__(self):
        self.Q_diag = np.asarray(self.Q_diag, dtype=float)
        self.obstacles = [o if isinstance(o, Obstacle) else Obstacle(**o) for o in self.obstacles]
        if np.any(self.Q_diag < 0):
            raise ValueError("Q must be positive semidefinite (nonnegative diagonal)")
        if self.alpha_ca < 0 or self.alpha_obs < 0:
            raise ValueError("penalty scales must be nonnegative")
        if not self.safety_distance > 0:
            raise ValueError("safety distance must be positive")

    def expand(self, n: int, m: int, agents: int) -> np.ndarray:
        if self.Q_diag.size == n + m:
            return self.Q_diag
        if agents and self.Q_diag.size == 6:
            return np.concatenate([np.tile(self.Q_diag[:4], agents), np.tile(self.Q_diag[4:], agents)])
        raise ValueError(f"Q_diag has {self.Q_diag.size} entries; expected {n + m} or a 6-entry per-agent pattern")


class StageLoss:
    """Stage loss evaluated on batched ``x`` (``(..., n)``) and ``u`` (``(..., m)``).

    ``agents`` > 0 treats the state as stacked ``(p, q)`` vehicles, enabling the
    collision and obstacle terms.
    """

    def __init__(self, weights: LossWeights, setpoint, input_dim: int, agents: int = 0):
        self.weights = weights
        self.setpoint = np.asarray(setpoint, dtype=float)
        self.n = self.setpoint.size
        self.m = input_dim
        self.agents = agents
        self.Q = weights.expand(self.n, self.m, agents)
        self._pairs = np.triu_indices(agents, 1) if agents > 1 else None

    def _positions(self, x):
        return x.reshape(x.shape[:-1] + (self.agents, 4))[..., :2]

    def terms(self, x, u) -> dict:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        z = np.concatenate([x - self.setpoint, u], axis=-1)
        out = {"traj": np.sum(self.Q * z * z, axis=-1)}
        zero = np.zeros(x.shape[:-1])
        out["ca"], out["obs"] = zero, zero.copy()
        wts = self.weights
        if self.agents:
            p = self._positions(x)
            if self._pairs is not None and wts.alpha_ca > 0:
                i, j = self._pairs
                dist = np.linalg.norm(p[..., i, :] - p[..., j, :], axis=-1)
                hinge = np.maximum(wts.safety_distance - dist, 0.0)
                out["ca"] = wts.alpha_ca * np.sum(hinge * hinge, axis=-1)
            if wts.obstacles and wts.alpha_obs > 0:
                acc = zero.copy()
                for ob in wts.obstacles:
                    d2 = np.sum((p - ob.center) ** 2, axis=-1)
                    acc = acc + np.sum(np.exp(-d2 / ob.width**2), axis=-1)
                out["obs"] = wts.alpha_obs * acc
        out["total"] = out["traj"] + out["ca"] + out["obs"]
        return out

    def __call__(self, x, u):
        return self.terms(x, u)["total"]

    def grad(self, x, u):
        """Gradients ``(dl/dx, dl/du)`` with the same batch shape as the inputs."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        n = self.n
        z = np.concatenate([x - self.setpoint, u], axis=-1)
        gz = 2.0 * self.Q * z
        gx, gu = gz[..., :n].copy(), gz[..., n:]
        if not self.agents:
            return gx, gu
        wts = self.weights
        p = self._positions(x)
        gp = np.zeros_like(p)
        if self._pairs is not None and wts.alpha_ca > 0:
            i, j = self._pairs
            diff = p[..., i, :] - p[..., j, :]
            dist = np.linalg.norm(diff, axis=-1)
            hinge = np.maximum(wts.safety_distance - dist, 0.0)
            # d/dp_i of hinge^2 = -2 hinge (p_i - p_j)/d; zero at the corner and at d = 0
            safe = np.where(dist > 0, dist, 1.0)
            coef = np.where((hinge > 0) & (dist > 0), -2.0 * wts.alpha_ca * hinge / safe, 0.0)
            pair_g = coef[..., None] * diff
            for k in range(len(i)):
                gp[..., i[k], :] += pair_g[..., k, :]
                gp[..., j[k], :] -= pair_g[..., k, :]
        if wts.obstacles and wts.alpha_obs > 0:
            for ob in wts.obstacles:
                d = p - ob.center
                bump = np.exp(-np.sum(d * d, axis=-1) / ob.width**2)
                gp += wts.alpha_obs * bump[..., None] * (-2.0 / ob.width**2) * d
        gxs = gx.reshape(x.shape[:-1] + (self.agents, 4))
        gxs[..., :2] += gp
        return gxs.reshape(x.shape), gu


def stage_loss(x_t, u_t, weights: LossWeights, setpoint, agents: int = 0):
    """Scalar stage loss and its decomposition for a single time step."""
    terms = StageLoss(weights, setpoint, np.size(u_t), agents).terms(x_t, u_t)
    return float(terms["total"]), {k: float(v) for k, v in terms.items() if k != "total"}


@dataclass
class TrainConfig:
    horizon: int
    batch_size: int
    epochs: int
    lr: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"
    checkpoint_every: int = 50
    validation_size: int = 16

    def __post_init__(self):
        if self.horizon < 1 or self.batch_size < 1:
            raise ValueError("horizon and batch size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class Problem:
    """What the objective needs from a scenario: plant, base controller, loss, REN setup.

    Scenarios expose the same attributes; this class builds small instances directly.
    """

    def __init__(self, plant, base, loss: StageLoss, dims: RenDims, activation: str = "tanh",
                 epsilon: float = 1e-3):
        self.plant, self.base, self.stage_loss = plant, base, loss
        self.ren_dims, self.activation, self.epsilon = dims, activation, epsilon


def _forward(theta: RenTheta, problem, w):
    w = np.asarray(w, dtype=float)
    if w.ndim != 3:
        raise ValueError(f"disturbance batch must have shape (S, T+1, n), got {w.shape}")
    if w.shape[0] == 0:
        raise ValueError("empty disturbance batch")
    weights = theta_to_weights(theta)
    tr = ren_forward_batch(weights, w, problem.activation)
    plant, base = problem.plant, problem.base
    S, T1, n = w.shape
    x = np.zeros((S, T1, n))
    u = np.zeros((S, T1, plant.input_dim))
    for t in range(T1):
        x[:, t] = w[:, 0] if t == 0 else plant.dynamics(x[:, t - 1], u[:, t - 1]) + w[:, t]
        u[:, t] = base.control(x[:, t]) + tr.u[:, t]
    stage = problem.stage_loss(x, u)
    J = float(np.sum(stage) / S)
    if not np.isfinite(J):
        bad = np.argwhere(~np.isfinite(stage))
        raise FloatingPointError(f"non-finite objective (first at sample {bad[0][0]}, step {bad[0][1]})")
    return J, weights, tr, x, u, stage


def batch_objective(theta: RenTheta, problem, w_batch):
    """``J = (1/S) sum_s sum_t l(x_t^s, u_t^s)``; also returns ``(x, u, stage)`` arrays."""
    J, _, _, x, u, stage = _forward(theta, problem, w_batch)
    return J, {"x": x, "u": u, "stage_loss": stage}


def value_and_grad(theta: RenTheta, problem, w_batch):
    """Objective and its exact gradient w.r.t. ``theta`` by a full reverse sweep."""
    J, weights, tr, x, u, _ = _forward(theta, problem, w_batch)
    plant, base = problem.plant, problem.base
    S, T1, _ = x.shape
    lx, lu = problem.stage_loss.grad(x, u)
    gv = np.zeros_like(u)
    a_next = None  # adjoint of x_{t+1}
    for t in range(T1 - 1, -1, -1):
        gx, gu = lx[:, t], lu[:, t]
        if a_next is not None:
            fx, fu = plant.vjp(x[:, t], u[:, t], a_next)
            gx, gu = gx + fx, gu + fu
        gv[:, t] = gu
        a_next = gx + base.vjp(x[:, t], gu)
    grad = ren_backward(weights, theta, tr, gv / S)
    return J, grad


def grad_objective(theta: RenTheta, problem, w_batch) -> RenTheta:
    return value_and_grad(theta, problem, w_batch)[1]


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    def __init__(self, lr=1e-3):
        self.lr = lr

    def step(self, params, grad):
        return params - self.lr * grad


class PrecheckFailed(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, J: float, J0: float):
        super().__init__(f"objective diverged at epoch {epoch}: J={J:.4g} vs initial {J0:.4g}")
        self.epoch = epoch


def base_loop_check(problem, x0, horizon: int, tol: float = 1e-2, bound: float = 1e3) -> dict:
    """Roll the base loop (``M = 0``) from ``x0`` and check it stays bounded and settles."""
    plant, base = problem.plant, problem.base
    setpoint = getattr(problem.stage_loss, "setpoint", np.zeros(plant.state_dim))
    x = np.asarray(x0, dtype=float)
    peak = np.abs(x).max()
    for _ in range(horizon):
        x = plant.dynamics(x, base.control(x))
        peak = max(peak, np.abs(x).max())
        if not np.isfinite(peak) or peak > bound:
            return {"ok": False, "peak": float(peak), "final_deviation": float("inf")}
    dev = float(np.linalg.norm(x - setpoint))
    scale = max(1.0, float(np.linalg.norm(np.asarray(x0) - setpoint)))
    return {"ok": dev <= tol * scale, "peak": float(peak), "final_deviation": dev}


def stability_probe(theta: RenTheta, problem, w, horizon: int, bound: float = 1e3) -> dict:
    """Held-out rollout at an extended horizon, compared with the base loop on the same ``w``.

    ``w`` is a single disturbance ``(T'+1, n)``; only its first ``horizon+1`` steps are used.
    """
    w = np.asarray(w, dtype=float)[None, : horizon + 1]
    setpoint = problem.stage_loss.setpoint
    _, _, _, x, _, _ = _forward(theta, problem, w)
    _, _, _, xb, _, _ = _forward(RenTheta.zeros(theta.dims, theta.epsilon), problem, w)
    dev = float(np.linalg.norm(x[0, -1] - setpoint))
    dev_base = float(np.linalg.norm(xb[0, -1] - setpoint))
    peak = float(np.abs(x).max())
    return {"bounded": peak <= bound, "peak": peak, "terminal_deviation": dev,
            "base_terminal_deviation": dev_base, "ok": peak <= bound and dev <= 10.0 * dev_base}


@dataclass
class TrainResult:
    theta: RenTheta
    theta_init: RenTheta
    log: list
    J_init: float
    J_final: float
    probes: list = field(default_factory=list)


def train(config: TrainConfig, problem, sampler: Callable, theta0: Optional[RenTheta] = None,
          out_dir: Optional[str] = None, log_file: Optional[str] = None,
          x0_check=None, probe: bool = True) -> TrainResult:
    """Optimize ``theta`` on freshly sampled batches.

    ``sampler(S, T, rng)`` returns a ``(S, T+1, n)`` disturbance batch. ``J_init`` and
    ``J_final`` are evaluated on one fixed validation batch, so they are comparable.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    init_rng, batch_rng, val_rng = (np.random.default_rng(s) for s in seeds)
    T = config.horizon
    if theta0 is None:
        theta0 = init_theta(problem.ren_dims, init_rng, problem.epsilon)
    val_w = sampler(config.validation_size, T, val_rng)
    if x0_check is None:
        x0_check = val_w[0, 0]
    check = base_loop_check(problem, x0_check, 10 * T)
    if not check["ok"]:
        raise PrecheckFailed(f"base loop does not settle: {check}")

    probe_w = sampler(1, 5 * T, val_rng)[0]
    theta = theta0
    J_init = batch_objective(theta0, problem, val_w)[0]
    opt = Adam(config.lr) if config.optimizer == "adam" else SGD(config.lr)
    records, probes = [], []
    J_first = None
    fh = open(log_file, "w") if log_file else None
    try:
        for epoch in range(config.epochs):
            tic = time.perf_counter()
            w = sampler(config.batch_size, T, batch_rng)
            J, g = value_and_grad(theta, problem, w)
            if J_first is None:
                J_first = J
            if not np.isfinite(J) or J > 1e3 * J_first:
                raise TrainingDiverged(epoch, J, J_first)
            gvec = g.flat()
            theta = RenTheta.from_flat(theta.dims, opt.step(theta.flat(), gvec), theta.epsilon)
            ckpt = None
            last = epoch == config.epochs - 1
            if config.checkpoint_every and ((epoch + 1) % config.checkpoint_every == 0 or last):
                if out_dir:
                    ckpt = os.path.join(out_dir, f"theta_epoch{epoch + 1:05d}.json")
                    save_checkpoint(ckpt, theta, problem.activation)
                if probe:
                    pr = stability_probe(theta, problem, probe_w, 5 * T)
                    pr["epoch"] = epoch + 1
                    probes.append(pr)
            rec = {"epoch": epoch, "J": J, "grad_norm": float(np.linalg.norm(gvec)),
                   "wall_ms": (time.perf_counter() - tic) * 1e3, "checkpoint_path": ckpt}
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if epoch % 50 == 0:
                log.info("epoch %d  J=%.5g  |g|=%.3g", epoch, J, rec["grad_norm"])
    finally:
        if fh:
            fh.close()
    J_final = batch_objective(theta, problem, val_w)[0]
    return TrainResult(theta=theta, theta_init=theta0, log=records, J_init=J_init, J_final=J_final, probes=probes)


@dataclass
class GradcheckReport:
    passed: bool
    max_rel_error: float
    worst_index: int
    worst_block: str
    block_errors: dict
    checked: int
    tolerance: float

    def __bool__(self):
        return self.passed


def gradcheck(theta: RenTheta, problem, w_batch, tolerance: float = 1e-4, step: float = 1e-5,
              atol: float = 1e-8, seed: int = 0, grad_fn: Optional[Callable] = None) -> GradcheckReport:
    """Compare the analytic gradient with central differences, coordinate by coordinate.

    Relative error is ``|g - g_fd| / max(|g|, |g_fd|, atol)``. Above 500 parameters a
    random 10% of coordinates is checked. ``grad_fn`` overrides the analytic gradient
    (used to inject faults in tests).
    """
    grad_fn = grad_fn or grad_objective
    g = grad_fn(theta, problem, w_batch).flat()
    x0 = theta.flat()
    d = x0.size
    if d > 500:
        idx = np.sort(np.random.default_rng(seed).choice(d, size=max(1, d // 10), replace=False))
    else:
        idx = np.arange(d)
    dims, eps = theta.dims, theta.epsilon

    def J(vec):
        return batch_objective(RenTheta.from_flat(dims, vec, eps), problem, w_batch)[0]

    rel = np.zeros(idx.size)
    for k, i in enumerate(idx):
        e = np.zeros(d)
        e[i] = step
        num = (J(x0 + e) - J(x0 - e)) / (2 * step)
        rel[k] = abs(g[i] - num) / max(abs(g[i]), abs(num), atol)
    names = {}
    for name, sl in theta.block_slices().items():
        mask = (idx >= sl.start) & (idx < sl.stop)
        if mask.any():
            names[name] = float(rel[mask].max())
    w = int(np.argmax(rel))
    worst = int(idx[w])
    worst_block = next(n for n, sl in theta.block_slices().items() if sl.start <= worst < sl.stop)
    return GradcheckReport(passed=bool(rel.max() <= tolerance), max_rel_error=float(rel.max()),
                           worst_index=worst, worst_block=worst_block, block_errors=names,
                           checked=int(idx.size), tolerance=tolerance)
