"""Strictly causal plants, base controllers and disturbance models.

A plant advances ``x_t = f_t(x_{t-1:0}, u_{t-1:0}) + w_t`` with ``w_0 = x_0``.
Markovian plants implement :meth:`PlantModel.dynamics` (and :meth:`PlantModel.vjp`
when they are used for training); the history-based :meth:`PlantModel.f` is
derived from it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .signals import CausalOperator, FunctionOperator, Signal, Stepper


class PlantModel:
    state_dim: int
    input_dim: int
    memory: int = 1

    def dynamics(self, x_prev, u_prev):
        raise NotImplementedError

    def vjp(self, x_prev, u_prev, adj):
        """Adjoints ``(dL/dx_prev, dL/du_prev)`` given ``adj = dL/d f``."""
        raise NotImplementedError(f"{type(self).__name__} does not provide gradients")

    def f(self, t: int, x_hist, u_hist) -> np.ndarray:
        """Nominal prediction of ``x_t`` from ``x_{t-1:0}`` and ``u_{t-1:0}``.

        ``x_hist``/``u_hist`` hold at least ``t`` rows (rows ``0..t-1`` are used).
        """
        if t == 0:
            return np.zeros(self.state_dim)
        x_hist = np.asarray(x_hist, dtype=float)
        u_hist = np.asarray(u_hist, dtype=float)
        if len(x_hist) < t or len(u_hist) < t:
            raise ValueError(f"need {t} steps of history, got x:{len(x_hist)} u:{len(u_hist)}")
        return self.dynamics(x_hist[t - 1], u_hist[t - 1])

    def as_operator(self) -> CausalOperator:
        """The strictly causal operator ``(x, u) -> F(x, u)`` on stacked signals."""
        n, m = self.state_dim, self.input_dim

        def F(s: Signal) -> Signal:
            x, u = s.data[:, :n], s.data[:, n:]
            out = np.zeros((s.horizon, n))
            for t in range(1, s.horizon):
                out[t] = self.f(t, x[:t], u[:t])
            return Signal(out)

        return FunctionOperator(F, n + m, n, name=f"F[{type(self).__name__}]")


class LinearPlant(PlantModel):
    """``x_t = A x_{t-1} + B u_{t-1} + w_t``."""

    def __init__(self, A, B):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        if self.A.shape[0] != self.A.shape[1] or self.B.shape[0] != self.A.shape[0]:
            raise ValueError(f"incompatible shapes A{self.A.shape} B{self.B.shape}")
        self.state_dim, self.input_dim = self.B.shape

    def dynamics(self, x_prev, u_prev):
        return np.asarray(x_prev) @ self.A.T + np.asarray(u_prev) @ self.B.T

    def vjp(self, x_prev, u_prev, adj):
        return adj @ self.A, adj @ self.B


@dataclass(frozen=True)
class Drag:
    """Drag force ``C(q) q``: ``b q`` (linear) or ``b1 q + b2 |q|_2 q`` (nonlinear)."""

    kind: str
    b: float = 0.0
    b1: float = 0.0
    b2: float = 0.0

    def __post_init__(self):
        if self.kind not in ("linear", "nonlinear"):
            raise ValueError(f"drag type must be 'linear' or 'nonlinear', got {self.kind!r}")
        if min(self.b, self.b1, self.b2) < 0:
            raise ValueError("drag coefficients must be nonnegative")

    @property
    def coefficients(self) -> tuple[float, float]:
        """``(linear, quadratic)`` coefficients."""
        if self.kind == "linear":
            return self.b, 0.0
        return self.b1, self.b2

    @classmethod
    def from_dict(cls, d: dict) -> "Drag":
        d = dict(d)
        kind = d.pop("type", d.pop("kind", None))
        return cls(kind=kind, **{k: float(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        if self.kind == "linear":
            return {"type": "linear", "b": self.b}
        return {"type": "nonlinear", "b1": self.b1, "b2": self.b2}


@dataclass
class VehicleParams:
    targets: np.ndarray  # (N, 2)
    mass: float
    ts: float
    drag: Drag
    base_gains: np.ndarray  # (N, 2), k1', k2' per agent

    def __post_init__(self):
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if self.targets.shape[1] != 2:
            raise ValueError(f"targets must have shape (N, 2), got {self.targets.shape}")
        gains = np.asarray(self.base_gains, dtype=float)
        self.base_gains = np.broadcast_to(gains, self.targets.shape).copy()
        if not self.ts > 0 or not self.mass > 0:
            raise ValueError("ts and mass must be positive")
        if np.any(self.base_gains <= 0):
            raise ValueError("base gains must be positive")

    @property
    def count(self) -> int:
        return self.targets.shape[0]

    @property
    def setpoint(self) -> np.ndarray:
        """Target state ``(p_bar, 0)`` for every agent, flattened to ``4N``."""
        xs = np.zeros((self.count, 4))
        xs[:, :2] = self.targets
        return xs.ravel()


def _check_shapes(params: VehicleParams, x, u=None):
    N = params.count
    if np.shape(x)[-1] != 4 * N:
        raise ValueError(f"state must have trailing size {4 * N}, got {np.shape(x)}")
    if u is not None and np.shape(u)[-1] != 2 * N:
        raise ValueError(f"input must have trailing size {2 * N}, got {np.shape(u)}")


def vehicle_step(params: VehicleParams, x, u) -> np.ndarray:
    """One Euler step of the point-mass vehicles (batched over leading axes)."""
    _check_shapes(params, x, u)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    N = params.count
    xs = x.reshape(x.shape[:-1] + (N, 4))
    p, q = xs[..., :2], xs[..., 2:]
    F = u.reshape(u.shape[:-1] + (N, 2))
    c1, c2 = params.drag.coefficients
    speed = np.linalg.norm(q, axis=-1, keepdims=True)
    drag = c1 * q + c2 * speed * q
    out = np.concatenate([p + params.ts * q, q + params.ts / params.mass * (F - drag)], axis=-1)
    return out.reshape(x.shape)


def vehicle_step_vjp(params: VehicleParams, x, u, adj):
    """Adjoints of :func:`vehicle_step` w.r.t. ``x`` and ``u``.

    The drag Jacobian is ``b1 I + b2 (|q| I + q q^T / |q|)``; at ``q = 0`` the
    quadratic part is taken as zero.
    """
    x = np.asarray(x, dtype=float)
    N = params.count
    xs = x.reshape(x.shape[:-1] + (N, 4))
    q = xs[..., 2:]
    a = np.asarray(adj, dtype=float).reshape(xs.shape)
    ap, aq = a[..., :2], a[..., 2:]
    c1, c2 = params.drag.coefficients
    speed = np.linalg.norm(q, axis=-1, keepdims=True)
    safe = np.where(speed > 0, speed, 1.0)
    qa = np.sum(q * aq, axis=-1, keepdims=True)
    Jt_a = c1 * aq + c2 * (speed * aq + np.where(speed > 0, q * qa / safe, 0.0))
    k = params.ts / params.mass
    gx = np.concatenate([ap, params.ts * ap + aq - k * Jt_a], axis=-1).reshape(x.shape)
    gu = (k * aq).reshape(x.shape[:-1] + (2 * N,))
    return gx, gu


class VehiclePlant(PlantModel):
    def __init__(self, params: VehicleParams):
        self.params = params
        self.state_dim = 4 * params.count
        self.input_dim = 2 * params.count

    def dynamics(self, x_prev, u_prev):
        return vehicle_step(self.params, x_prev, u_prev)

    def vjp(self, x_prev, u_prev, adj):
        return vehicle_step_vjp(self.params, x_prev, u_prev, adj)


class LinearFeedback(CausalOperator):
    """Memoryless state feedback ``u_t = K (x_t - x_bar)``."""

    def __init__(self, K, setpoint=None):
        self.K = np.atleast_2d(np.asarray(K, dtype=float))
        self.out_dim, self.in_dim = self.K.shape
        self.setpoint = np.zeros(self.in_dim) if setpoint is None else np.asarray(setpoint, dtype=float)

    def control(self, x):
        return (np.asarray(x, dtype=float) - self.setpoint) @ self.K.T

    def vjp(self, x, gu):
        return np.asarray(gu) @ self.K

    def apply(self, s: Signal) -> Signal:
        return Signal(self.control(s.data))

    def stepper(self) -> Stepper:
        ctrl = self

        class _Static(Stepper):
            def step(self, x_t):
                return ctrl.control(x_t)

        return _Static()


def vehicle_base_controller(params: VehicleParams) -> LinearFeedback:
    """``u = K' (p_bar - p)`` per agent, written as a :class:`LinearFeedback`."""
    N = params.count
    K = np.zeros((2 * N, 4 * N))
    for i in range(N):
        K[2 * i : 2 * i + 2, 4 * i : 4 * i + 2] = -np.diag(params.base_gains[i])
    return LinearFeedback(K, params.setpoint)


def base_control(params: VehicleParams, x) -> np.ndarray:
    """Proportional base control ``diag(k1', k2') (p_bar - p)`` for every agent."""
    _check_shapes(params, x)
    x = np.asarray(x, dtype=float)
    N = params.count
    p = x.reshape(x.shape[:-1] + (N, 4))[..., :2]
    u = params.base_gains * (params.targets - p)
    return u.reshape(x.shape[:-1] + (2 * N,))


def reconstruct_disturbance(plant: PlantModel, x_trace, u_trace, t: int) -> np.ndarray:
    """``w_t = x_t - f_t(x_{t-1:0}, u_{t-1:0})``, with ``w_0 = x_0``."""
    x = x_trace.data if isinstance(x_trace, Signal) else np.asarray(x_trace, dtype=float)
    u = u_trace.data if isinstance(u_trace, Signal) else np.asarray(u_trace, dtype=float)
    if t < 0 or len(x) <= t:
        raise ValueError(f"state trace too short for t={t}")
    if t == 0:
        return np.array(x[0])
    if len(u) < t:
        raise ValueError(f"input trace too short for t={t}")
    return x[t] - plant.f(t, x[:t], u[:t])


def _check_psd(S: np.ndarray, what: str) -> np.ndarray:
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != S.shape[1] or not np.allclose(S, S.T, atol=1e-12):
        raise ValueError(f"{what} must be a symmetric matrix")
    vals, vecs = np.linalg.eigh(S)
    if vals.min() < -1e-12 * max(1.0, abs(vals).max()):
        raise ValueError(f"{what} is not positive semidefinite (min eigenvalue {vals.min():.3g})")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass
class DisturbanceModel:
    """Gaussian disturbances: ``w_0 ~ N(mean0, cov0)``, ``w_t ~ N(mean, cov)`` for ``t >= 1``.

    With the default zero process terms every sample has the benchmark form
    ``(x_0, 0, 0, ...)``.
    """

    mean0: np.ndarray
    cov0: np.ndarray
    mean: Optional[np.ndarray] = None
    cov: Optional[np.ndarray] = None
    family: str = "gaussian"
    seed: int = 0
    _roots: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.mean0 = np.atleast_1d(np.asarray(self.mean0, dtype=float))
        n = self.mean0.size
        self.cov0 = np.asarray(self.cov0, dtype=float)
        if self.cov0.ndim < 2:
            self.cov0 = np.diag(np.broadcast_to(self.cov0, (n,)))
        self.mean = np.zeros(n) if self.mean is None else np.broadcast_to(np.asarray(self.mean, float), (n,)).copy()
        if self.cov is None:
            self.cov = np.zeros((n, n))
        self.cov = np.asarray(self.cov, dtype=float)
        if self.cov.ndim < 2:
            self.cov = np.diag(np.broadcast_to(self.cov, (n,)))
        if self.family != "gaussian":
            raise ValueError(f"unsupported disturbance family {self.family!r}")
        if self.cov0.shape != (n, n) or self.cov.shape != (n, n):
            raise ValueError("covariance shapes do not match the mean")
        self._roots = (_check_psd(self.cov0, "cov0"), _check_psd(self.cov, "cov"))

    @property
    def dim(self) -> int:
        return self.mean0.size

    def sample(self, S: int, T: int, rng=None) -> np.ndarray:
        """Array of shape ``(S, T+1, n)``."""
        if S < 1:
            raise ValueError("batch size must be at least 1")
        rng = np.random.default_rng(self.seed if rng is None else rng)
        n = self.dim
        R0, R = self._roots
        w = np.empty((S, T + 1, n))
        w[:, 0] = self.mean0 + rng.standard_normal((S, n)) @ R0.T
        if T > 0:
            w[:, 1:] = self.mean + rng.standard_normal((S, T, n)) @ R.T
        return w


def sample_disturbances(model: DisturbanceModel, S: int, T: int, rng=None) -> list[Signal]:
    return [Signal(w) for w in model.sample(S, T, rng)]
