"""Closed loop ``u = K'(x) + M(w)`` and trace-level checks of the parametrization.

Closed-loop maps are handled extensionally: an operator is known through its
action on signals, and every structural property (achievability, completeness, Youla) is checked as an equality
of traces on a finite horizon.
"""
from __future__ import annotations

import json
import os
import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .plant import LinearFeedback, LinearPlant, PlantModel
from .signals import CausalOperator, FunctionOperator, Signal, Stepper, lp_norm


class RolloutError(FloatingPointError):
    def __init__(self, step: int, msg: str = "non-finite value in closed loop"):
        super().__init__(f"{msg} at step {step}")
        self.step = step


W_SOURCES = ("injected", "reconstructed")


@dataclass
class NeurSlsController:
    """Base controller plus a free causal operator fed with the disturbance."""

    base: CausalOperator
    emme: CausalOperator
    plant: PlantModel
    w_source: str = "injected"

    def __post_init__(self):
        if self.w_source not in W_SOURCES:
            raise ValueError(f"w_source must be one of {W_SOURCES}")
        if self.emme.in_dim != self.plant.state_dim or self.emme.out_dim != self.plant.input_dim:
            raise ValueError(
                f"operator dims {self.emme.in_dim}->{self.emme.out_dim} do not match plant "
                f"{self.plant.state_dim}->{self.plant.input_dim}"
            )


@dataclass
class Rollout:
    w: Signal
    x: Signal
    u: Signal
    v: Signal
    w_hat: Signal
    losses: Optional[np.ndarray] = None
    loss_terms: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.x.horizon - 1

    def export(self, out_dir, prefix: str = "") -> list[str]:
        """Write ``w/x/u/v`` CSV traces and a JSON sidecar; returns the paths."""
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        for name in ("w", "x", "u", "v"):
            path = os.path.join(out_dir, f"{prefix}{name}.csv")
            getattr(self, name).to_csv(path)
            paths.append(path)
        side = {"meta": self.meta, "horizon": self.horizon}
        if self.losses is not None:
            side["stage_loss"] = [float(v) for v in self.losses]
            side["loss_terms"] = {k: [float(v) for v in arr] for k, arr in self.loss_terms.items()}
        path = os.path.join(out_dir, f"{prefix}rollout.json")
        with open(path, "w") as fh:
            json.dump(side, fh, indent=1, sort_keys=True)
        paths.append(path)
        return paths


def _simulate(ctrl: NeurSlsController, w: np.ndarray):
    """Core loop over a batch ``w`` of shape ``(S, T+1, n)``."""
    plant = ctrl.plant
    S, T1, n = w.shape
    m = plant.input_dim
    x = np.zeros((S, T1, n))
    u = np.zeros((S, T1, m))
    v = np.zeros((S, T1, m))
    w_hat = np.zeros((S, T1, n))
    emme = ctrl.emme.stepper()
    base = ctrl.base.stepper()
    reconstruct = ctrl.w_source == "reconstructed"
    markov = type(plant).f is PlantModel.f
    for t in range(T1):
        if t == 0:
            x[:, 0] = w[:, 0]
            w_hat[:, 0] = x[:, 0]
        else:
            if markov:
                pred = plant.dynamics(x[:, t - 1], u[:, t - 1])
            else:
                pred = np.stack([plant.f(t, x[k, :t], u[k, :t]) for k in range(S)])
            x[:, t] = pred + w[:, t]
            w_hat[:, t] = x[:, t] - pred if reconstruct else w[:, t]
        v[:, t] = emme.step(w_hat[:, t])
        u[:, t] = base.step(x[:, t]) + v[:, t]
        if not (np.all(np.isfinite(x[:, t])) and np.all(np.isfinite(u[:, t]))):
            raise RolloutError(t)
    return x, u, v, w_hat


def rollout(ctrl: NeurSlsController, w: Signal, horizon: Optional[int] = None, loss=None,
            meta: Optional[dict] = None) -> Rollout:
    """Simulate the closed loop driven by ``w`` (``w_0`` is the initial state).

    ``horizon`` is the number of steps ``T``; by default ``T = w.horizon - 1``.
    ``loss`` is an optional stage-loss object exposing ``terms(x, u)``.
    """
    if not isinstance(w, Signal):
        w = Signal(w)
    if w.dim != ctrl.plant.state_dim:
        raise ValueError(f"disturbance dim {w.dim} != plant state dim {ctrl.plant.state_dim}")
    T1 = w.horizon if horizon is None else horizon + 1
    if T1 > w.horizon:
        raise ValueError(f"horizon {T1 - 1} exceeds disturbance length {w.horizon - 1}")
    x, u, v, w_hat = _simulate(ctrl, w.data[None, :T1])
    out = Rollout(w=Signal(w.data[:T1]), x=Signal(x[0]), u=Signal(u[0]), v=Signal(v[0]),
                  w_hat=Signal(w_hat[0]), meta=dict(meta or {}))
    out.meta.setdefault("w_source", ctrl.w_source)
    if loss is not None:
        terms = loss.terms(x[0], u[0])
        out.losses = terms.pop("total")
        out.loss_terms = terms
    return out


def rollout_batch(ctrl: NeurSlsController, w) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized rollouts over ``w`` of shape ``(S, T+1, n)``; returns ``(x, u, v)``."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 3 or w.shape[-1] != ctrl.plant.state_dim:
        raise ValueError(f"expected (S, T+1, {ctrl.plant.state_dim}) disturbances, got {w.shape}")
    x, u, v, _ = _simulate(ctrl, w)
    return x, u, v


class ClosedLoopMap(CausalOperator):
    """The map ``w -> x`` (``which='x'``), ``w -> u`` or ``w -> (x - offset, u)``."""

    def __init__(self, ctrl: NeurSlsController, which: str = "x", offset=None):
        if which not in ("x", "u", "xu"):
            raise ValueError("which must be 'x', 'u' or 'xu'")
        self.ctrl, self.which = ctrl, which
        n, m = ctrl.plant.state_dim, ctrl.plant.input_dim
        self.offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
        self.in_dim = n
        self.out_dim = {"x": n, "u": m, "xu": n + m}[which]

    def apply(self, s: Signal) -> Signal:
        r = rollout(self.ctrl, s)
        if self.which == "x":
            return r.x
        if self.which == "u":
            return r.u
        return Signal(np.hstack([r.x.data - self.offset, r.u.data]))


def closed_loop_maps(ctrl: NeurSlsController) -> tuple[ClosedLoopMap, ClosedLoopMap]:
    return ClosedLoopMap(ctrl, "x"), ClosedLoopMap(ctrl, "u")


@dataclass
class AchievabilityReport:
    passed: bool
    samples: int
    max_error: float
    # (sample index, t, error) of the first violation
    failure: Optional[tuple] = None

    def __bool__(self):
        return self.passed


def _eval(op, w: Signal) -> Signal:
    out = op.apply(w) if isinstance(op, CausalOperator) else op(w)
    return out if isinstance(out, Signal) else Signal(out)


def check_achievability(psi_x, psi_u, plant: PlantModel, w_batch, tol: float = 1e-9) -> AchievabilityReport:
    """Check ``Psi_x(w)_t - f_t(Psi_x(w)_{t-1:0}, Psi_u(w)_{t-1:0}) = w_t`` for each ``w``."""
    worst, failure = 0.0, None
    w_batch = list(w_batch)
    for k, w in enumerate(w_batch):
        w = w if isinstance(w, Signal) else Signal(w)
        X, U = _eval(psi_x, w).data, _eval(psi_u, w).data
        for t in range(w.horizon):
            resid = X[t] - plant.f(t, X[:t], U[:t]) - w[t]
            err = float(np.max(np.abs(resid)))
            worst = max(worst, err)
            if err > tol and failure is None:
                failure = (k, t, err)
    return AchievabilityReport(passed=failure is None, samples=len(w_batch), max_error=worst, failure=failure)


def completeness_construct(base: CausalOperator, psi_x, psi_u) -> CausalOperator:
    """Operator ``w -> -K'(Psi_x(w)) + Psi_u(w)`` that makes the loop reproduce ``(Psi_x, Psi_u)``."""
    in_dim = getattr(psi_x, "in_dim", None) or base.in_dim

    def emme(w: Signal) -> Signal:
        X, U = _eval(psi_x, w), _eval(psi_u, w)
        if X.horizon != w.horizon or U.horizon != w.horizon:
            raise ValueError("target maps returned traces with a mismatched horizon")
        return Signal(U.data - _eval(base, X).data)

    return FunctionOperator(emme, in_dim, base.out_dim, name="completeness")


class FirOperator(CausalOperator):
    """Finite impulse response ``(M w)_t = sum_{i=0}^{N} M[i] w_{t-i}``."""

    def __init__(self, taps):
        taps = [np.atleast_2d(np.asarray(M, dtype=float)) for M in taps]
        if not taps:
            raise ValueError("FIR operator needs at least one tap")
        shape = taps[0].shape
        if any(M.shape != shape for M in taps):
            raise ValueError("all FIR taps must share a shape")
        self.taps = taps
        self.out_dim, self.in_dim = shape

    @property
    def order(self) -> int:
        return len(self.taps) - 1

    def apply(self, s: Signal) -> Signal:
        w = s.data
        out = np.zeros((s.horizon, self.out_dim))
        for i, M in enumerate(self.taps):
            if i < s.horizon:
                out[i:] += w[: s.horizon - i] @ M.T
        return Signal(out)

    def stepper(self) -> Stepper:
        taps = self.taps

        class _Fir(Stepper):
            def __init__(self):
                self.buf = deque(maxlen=len(taps))

            def step(self, w_t):
                self.buf.appendleft(np.asarray(w_t, dtype=float))
                return sum(b @ M.T for b, M in zip(self.buf, taps))

        return _Fir()

    def __add__(self, other: "FirOperator") -> "FirOperator":
        N = max(len(self.taps), len(other.taps))
        pad = lambda taps: taps + [np.zeros_like(taps[0])] * (N - len(taps))  # noqa: E731
        return FirOperator([a + b for a, b in zip(pad(self.taps), pad(other.taps))])

    def __neg__(self) -> "FirOperator":
        return FirOperator([-M for M in self.taps])

    def __sub__(self, other: "FirOperator") -> "FirOperator":
        return self + (-other)


def spectral_radius(A) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.atleast_2d(A)))))


def _linear_setup(A, B, K):
    plant = LinearPlant(A, B)
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if K.shape != (plant.input_dim, plant.state_dim):
        raise ValueError(f"gain shape {K.shape} != {(plant.input_dim, plant.state_dim)}")
    rho = spectral_radius(plant.A + plant.B @ K)
    if not rho < 1.0:
        raise ValueError(f"A + B K' is not Schur (spectral radius {rho:.4g})")
    return plant, K


def youla_rollout(A, B, K, M: CausalOperator, w: Signal) -> Rollout:
    """Linear plant under ``u = K' x + M(x - z^-1 (A x + B u))``."""
    plant, K = _linear_setup(A, B, K)
    ctrl = NeurSlsController(LinearFeedback(K), M, plant, w_source="reconstructed")
    return rollout(ctrl, w)


def youla_q_rollout(A, B, K, Q, w: Signal) -> Rollout:
    """Classical loop ``u = Q x + (K' - Q) z^-1 (A x + B u)`` with a stable ``Q``.

    ``Q`` is a static gain or a :class:`FirOperator`. Simulated directly, without
    going through the free-operator form, so the two can be compared.
    """
    plant, K = _linear_setup(A, B, K)
    if not isinstance(Q, FirOperator):
        Q = FirOperator([Q])
    if not isinstance(w, Signal):
        w = Signal(w)
    T1, n, m = w.horizon, plant.state_dim, plant.input_dim
    qx, qy = Q.stepper(), Q.stepper()
    x, u = np.zeros((T1, n)), np.zeros((T1, m))
    y_prev = np.zeros(n)
    for t in range(T1):
        x[t] = w[0] if t == 0 else plant.dynamics(x[t - 1], u[t - 1]) + w[t]
        u[t] = qx.step(x[t]) + K @ y_prev - qy.step(y_prev)
        y_prev = plant.A @ x[t] + plant.B @ u[t]
    zeros = Signal.zeros(T1, m)
    return Rollout(w=w, x=Signal(x), u=Signal(u), v=zeros, w_hat=w, meta={"form": "youla-Q"})


def empirical_gain(op, w_batch, p=2) -> float:
    """Largest observed ratio ``|op(w)|_p / |w|_p`` over the batch (a lower bound on the gain)."""
    best = 0.0
    seen = 0
    for w in w_batch:
        w = w if isinstance(w, Signal) else Signal(w)
        den = lp_norm(w, p)
        if den == 0.0:
            warnings.warn("skipping zero-norm input in empirical_gain", RuntimeWarning, stacklevel=2)
            continue
        seen += 1
        best = max(best, lp_norm(_eval(op, w), p) / den)
    if seen == 0:
        raise ValueError("empirical_gain needs at least one nonzero input")
    return best
