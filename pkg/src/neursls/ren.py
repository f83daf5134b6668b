"""Acyclic contracting recurrent equilibrium network (REN).

The operator ``w -> u`` is generated by

    xi_t = A1 xi_{t-1} + B1 sigma(v_t) + B2 w_t
    v_t  = C1 xi_{t-1} + D11 sigma(v_t) + D12 w_t
    u_t  = C2 xi_{t-1} + D21 sigma(v_t) + D22 w_t,      xi_{-1} = 0

with ``D11`` strictly lower triangular so ``v_t`` is solved neuron by neuron.
The weights are a smooth image of unconstrained parameters: ``H = X^T X + eps I``
is read block-wise as the contraction LMI, which therefore holds for every
parameter value.

Everything here is plain numpy; gradients are exact reverse-mode sweeps written
out by hand.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .signals import CausalOperator, Signal, Stepper

ACTIVATIONS = ("tanh", "relu")


def _act(name: str):
    if name == "tanh":
        def f(v):
            return np.tanh(v)

        def df(v, s):
            return 1.0 - s * s
    elif name == "relu":
        def f(v):
            return np.maximum(v, 0.0)

        def df(v, s):
            return (v > 0.0).astype(float)
    else:
        raise ValueError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")
    return f, df


@dataclass(frozen=True)
class RenDims:
    q: int  # state size
    r: int  # neurons
    n: int  # input size
    m: int  # output size

    def __post_init__(self):
        for k in ("q", "r", "n", "m"):
            v = getattr(self, k)
            if int(v) != v or v < 1:
                raise ValueError(f"RenDims.{k} must be a positive integer, got {v!r}")

    @property
    def param_count(self) -> int:
        q, r, n, m = self.q, self.r, self.n, self.m
        return (2 * q + r) ** 2 + q * q + q * n + m * q + r * n + m * r + m * n


_THETA_BLOCKS = ("X", "Y1", "B2f", "C2f", "D12f", "D21f", "D22f")


def theta_shapes(dims: RenDims) -> dict:
    q, r, n, m = dims.q, dims.r, dims.n, dims.m
    return {
        "X": (2 * q + r, 2 * q + r),
        "Y1": (q, q),
        "B2f": (q, n),
        "C2f": (m, q),
        "D12f": (r, n),
        "D21f": (m, r),
        "D22f": (m, n),
    }


@dataclass
class RenTheta:
    """Unconstrained REN parameters. ``epsilon`` is a fixed margin, not trained."""

    X: np.ndarray
    Y1: np.ndarray
    B2f: np.ndarray
    C2f: np.ndarray
    D12f: np.ndarray
    D21f: np.ndarray
    D22f: np.ndarray
    epsilon: float = 1e-3

    @property
    def dims(self) -> RenDims:
        q = self.Y1.shape[0]
        r = self.D12f.shape[0]
        return RenDims(q=q, r=r, n=self.B2f.shape[1], m=self.C2f.shape[0])

    def blocks(self) -> dict:
        return {k: getattr(self, k) for k in _THETA_BLOCKS}

    def validate(self, dims: Optional[RenDims] = None) -> RenDims:
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        dims = dims or self.dims
        for k, shape in theta_shapes(dims).items():
            got = np.shape(getattr(self, k))
            if got != shape:
                raise ValueError(f"theta block {k} has shape {got}, expected {shape}")
        return dims

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(getattr(self, k)) for k in _THETA_BLOCKS])

    @classmethod
    def from_flat(cls, dims: RenDims, vec, epsilon: float = 1e-3) -> "RenTheta":
        vec = np.asarray(vec, dtype=float)
        if vec.size != dims.param_count:
            raise ValueError(f"expected {dims.param_count} parameters, got {vec.size}")
        out, k = {}, 0
        for name, shape in theta_shapes(dims).items():
            size = shape[0] * shape[1]
            out[name] = vec[k : k + size].reshape(shape).copy()
            k += size
        return cls(epsilon=epsilon, **out)

    @classmethod
    def zeros(cls, dims: RenDims, epsilon: float = 1e-3) -> "RenTheta":
        return cls.from_flat(dims, np.zeros(dims.param_count), epsilon)

    def block_slices(self) -> dict:
        """Map block name -> slice into :meth:`flat`."""
        out, k = {}, 0
        for name in _THETA_BLOCKS:
            size = getattr(self, name).size
            out[name] = slice(k, k + size)
            k += size
        return out


def init_theta(dims: RenDims, rng=None, epsilon: float = 1e-3, out_std: float = 0.1) -> RenTheta:
    """Random initial parameters with a small operator gain.

    ``X`` is Gaussian with std ``1/sqrt(2q+r)``, ``Y1`` is zero and the free
    input/output blocks are Gaussian with std ``out_std``.
    """
    rng = np.random.default_rng(rng)
    shapes = theta_shapes(dims)
    nx = shapes["X"][0]
    blocks = {"X": rng.normal(scale=1.0 / np.sqrt(nx), size=shapes["X"]), "Y1": np.zeros(shapes["Y1"])}
    for k in ("B2f", "C2f", "D12f", "D21f", "D22f"):
        blocks[k] = rng.normal(scale=out_std, size=shapes[k])
    return RenTheta(epsilon=epsilon, **blocks)


@dataclass
class RenWeights:
    A1: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    C1: np.ndarray
    D11: np.ndarray
    D12: np.ndarray
    C2: np.ndarray
    D21: np.ndarray
    D22: np.ndarray
    P: np.ndarray
    # implicit-form factors kept for the metric and for the backward pass
    E: np.ndarray
    lam: np.ndarray

    @property
    def dims(self) -> RenDims:
        return RenDims(q=self.A1.shape[0], r=self.C1.shape[0], n=self.B2.shape[1], m=self.C2.shape[0])

    @property
    def metric(self) -> np.ndarray:
        """Contraction metric ``E^T P^{-1} E`` on the REN state."""
        M = self.E.T @ np.linalg.solve(self.P, self.E)
        return 0.5 * (M + M.T)


def _partition(H: np.ndarray, q: int, r: int):
    a, b = q, q + r
    return {
        "H11": H[:a, :a], "H21": H[a:b, :a], "H22": H[a:b, a:b],
        "H31": H[b:, :a], "H32": H[b:, a:b], "H33": H[b:, b:],
    }


def theta_to_weights(theta: RenTheta, dims: Optional[RenDims] = None) -> RenWeights:
    """Smooth map from free parameters to explicit REN weights."""
    dims = theta.validate(dims)
    q, r = dims.q, dims.r
    X = np.asarray(theta.X, dtype=float)
    H = X.T @ X + theta.epsilon * np.eye(2 * q + r)
    blk = _partition(H, q, r)
    P = blk["H33"]
    E = 0.5 * (blk["H11"] + P + theta.Y1 - theta.Y1.T)
    lam = 0.5 * np.diag(blk["H22"]).copy()
    D11_impl = -np.tril(blk["H22"], -1)
    A1, B1, B2 = np.split(
        np.linalg.solve(E, np.hstack([blk["H31"], blk["H32"], theta.B2f])), [q, q + r], axis=1
    )
    inv_lam = (1.0 / lam)[:, None]
    return RenWeights(
        A1=A1, B1=B1, B2=B2,
        C1=-blk["H21"] * inv_lam,
        D11=D11_impl * inv_lam,
        D12=theta.D12f * inv_lam,
        C2=np.array(theta.C2f, dtype=float),
        D21=np.array(theta.D21f, dtype=float),
        D22=np.array(theta.D22f, dtype=float),
        P=P.copy(), E=E, lam=lam,
    )


class RenTrace(NamedTuple):
    """Arrays from one (batched) forward pass; time is axis -2.

    ``xi`` holds ``xi_{-1}..xi_T`` so ``xi[..., t, :]`` is the state *entering*
    step ``t``.
    """

    w: np.ndarray
    xi: np.ndarray
    v: np.ndarray
    s: np.ndarray
    u: np.ndarray
    sigma: str


def ren_forward_batch(weights: RenWeights, w, sigma: str = "tanh", xi_init=None) -> RenTrace:
    """Run the REN over ``w`` of shape ``(..., T+1, n)``."""
    f, _ = _act(sigma)
    w = np.asarray(w, dtype=float)
    d = weights.dims
    if w.ndim < 2 or w.shape[-1] != d.n:
        raise ValueError(f"input must have shape (..., T+1, {d.n}), got {w.shape}")
    lead = w.shape[:-2]
    T1 = w.shape[-2]
    wb = w.reshape(-1, T1, d.n)
    B = wb.shape[0]
    xi = np.zeros((B, T1 + 1, d.q))
    if xi_init is not None:
        xi[:, 0] = np.broadcast_to(np.asarray(xi_init, dtype=float), (B, d.q))
    v = np.zeros((B, T1, d.r))
    s = np.zeros((B, T1, d.r))
    u = np.zeros((B, T1, d.m))
    W = weights
    for t in range(T1):
        x_prev = xi[:, t]
        wt = wb[:, t]
        base = x_prev @ W.C1.T + wt @ W.D12.T
        vt = v[:, t]
        st = s[:, t]
        for i in range(d.r):
            vt[:, i] = base[:, i] + st[:, :i] @ W.D11[i, :i]
            st[:, i] = f(vt[:, i])
        xi[:, t + 1] = x_prev @ W.A1.T + st @ W.B1.T + wt @ W.B2.T
        u[:, t] = x_prev @ W.C2.T + st @ W.D21.T + wt @ W.D22.T
    return RenTrace(
        w=w,
        xi=xi.reshape(lead + (T1 + 1, d.q)),
        v=v.reshape(lead + (T1, d.r)),
        s=s.reshape(lead + (T1, d.r)),
        u=u.reshape(lead + (T1, d.m)),
        sigma=sigma,
    )


def ren_forward(weights: RenWeights, w: Signal, sigma: str = "tanh", xi_init=None):
    """Evaluate the REN on a signal; returns ``(u, xi, v)`` signals.

    The returned ``xi`` is ``xi_0..xi_T`` (the initial ``xi_{-1}`` is dropped).
    """
    if not isinstance(w, Signal):
        w = Signal(w)
    tr = ren_forward_batch(weights, w.data, sigma, xi_init)
    return Signal(tr.u), Signal(tr.xi[1:]), Signal(tr.v)


def weights_backward(weights: RenWeights, trace: RenTrace, du) -> dict:
    """Reverse sweep through time: gradient of ``sum <du_t, u_t>`` w.r.t. the weights.

    Returns a dict keyed like :class:`RenWeights` (no ``P``/``E``/``lam``) plus
    ``xi_init`` for the adjoint of the initial state.
    """
    _, df = _act(trace.sigma)
    W = weights
    d = W.dims
    du = np.asarray(du, dtype=float)
    if du.shape != trace.u.shape:
        raise ValueError(f"adjoint shape {du.shape} does not match output trace {trace.u.shape}")
    T1 = trace.u.shape[-2]
    w = trace.w.reshape(-1, T1, d.n)
    xi = trace.xi.reshape(-1, T1 + 1, d.q)
    v = trace.v.reshape(-1, T1, d.r)
    s = trace.s.reshape(-1, T1, d.r)
    gu_all = du.reshape(-1, T1, d.m)
    B = w.shape[0]

    g = {k: np.zeros_like(getattr(W, k)) for k in ("A1", "B1", "B2", "C1", "D11", "D12", "C2", "D21", "D22")}
    a_xi = np.zeros((B, d.q))  # adjoint of xi_t arriving from step t+1
    gv = np.zeros((B, d.r))
    for t in range(T1 - 1, -1, -1):
        gu = gu_all[:, t]
        x_prev, wt, st = xi[:, t], w[:, t], s[:, t]
        g["C2"] += gu.T @ x_prev
        g["D21"] += gu.T @ st
        g["D22"] += gu.T @ wt
        g["A1"] += a_xi.T @ x_prev
        g["B1"] += a_xi.T @ st
        g["B2"] += a_xi.T @ wt
        gs = gu @ W.D21 + a_xi @ W.B1
        slope = df(v[:, t], st)
        for i in range(d.r - 1, -1, -1):
            gv[:, i] = (gs[:, i] + gv[:, i + 1 :] @ W.D11[i + 1 :, i]) * slope[:, i]
        g["D11"] += np.tril(gv.T @ st, -1)
        g["C1"] += gv.T @ x_prev
        g["D12"] += gv.T @ wt
        a_xi = a_xi @ W.A1 + gu @ W.C2 + gv @ W.C1
    g["xi_init"] = a_xi.reshape(trace.xi.shape[:-2] + (d.q,))
    return g


def weights_vjp(theta: RenTheta, weights: RenWeights, gW: dict) -> RenTheta:
    """Pull a weight-space gradient back through :func:`theta_to_weights`."""
    d = weights.dims
    q, r = d.q, d.r
    E, lam = weights.E, weights.lam
    # A1 = E^-1 H31, B1 = E^-1 H32, B2 = E^-1 B2f
    gZ = np.linalg.solve(E.T, np.hstack([gW["A1"], gW["B1"], gW["B2"]]))
    Y = np.hstack([weights.A1, weights.B1, weights.B2])
    gE = -gZ @ Y.T
    gH31, gH32, gB2f = np.split(gZ, [q, q + r], axis=1)
    # row scalings by 1/lam
    gC1i = gW["C1"] / lam[:, None]
    gD11i = gW["D11"] / lam[:, None]
    gD12f = gW["D12"] / lam[:, None]
    glam = -(np.sum(gW["C1"] * weights.C1, axis=1) + np.sum(gW["D11"] * weights.D11, axis=1)
             + np.sum(gW["D12"] * weights.D12, axis=1)) / lam

    gH = np.zeros((2 * q + r, 2 * q + r))
    a, b = q, q + r
    gH[:a, :a] += 0.5 * gE
    gH[b:, b:] += 0.5 * gE
    gY1 = 0.5 * (gE - gE.T)
    gH[b:, :a] += gH31
    gH[b:, a:b] += gH32
    gH[a:b, :a] += -gC1i
    gH[a:b, a:b] += -np.tril(gD11i, -1) + np.diag(0.5 * glam)
    X = np.asarray(theta.X, dtype=float)
    gX = X @ (gH + gH.T)
    return RenTheta(
        X=gX, Y1=gY1, B2f=gB2f, C2f=np.array(gW["C2"]), D12f=gD12f,
        D21f=np.array(gW["D21"]), D22f=np.array(gW["D22"]), epsilon=theta.epsilon,
    )


def ren_backward(weights: RenWeights, theta: RenTheta, trace: RenTrace, du) -> RenTheta:
    """Exact gradient w.r.t. ``theta`` of ``sum_t <du_t, u_t>`` along ``trace``."""
    if trace.xi.shape[-1] != weights.dims.q or trace.w.shape[-1] != weights.dims.n:
        raise ValueError("trace does not match weights")
    return weights_vjp(theta, weights, weights_backward(weights, trace, du))


class RenOperator(CausalOperator):
    """The REN as a :class:`CausalOperator` ``w -> u``."""

    def __init__(self, theta: RenTheta, sigma: str = "tanh"):
        _act(sigma)
        self.theta = theta
        self.weights = theta_to_weights(theta)
        self.sigma = sigma
        d = self.weights.dims
        self.in_dim, self.out_dim = d.n, d.m

    def apply(self, s: Signal) -> Signal:
        return ren_forward(self.weights, s, self.sigma)[0]

    def stepper(self) -> Stepper:
        return _RenStepper(self.weights, self.sigma)


class _RenStepper(Stepper):
    def __init__(self, weights: RenWeights, sigma: str):
        self.W = weights
        self.f, _ = _act(sigma)
        self.xi = np.zeros(weights.dims.q)

    def step(self, w_t):
        # w_t may carry a leading batch axis
        W = self.W
        w_t = np.asarray(w_t, dtype=float)
        xi = np.broadcast_to(self.xi, w_t.shape[:-1] + (W.dims.q,))
        base = xi @ W.C1.T + w_t @ W.D12.T
        s = np.zeros(w_t.shape[:-1] + (W.dims.r,))
        for i in range(W.dims.r):
            s[..., i] = self.f(base[..., i] + s[..., :i] @ W.D11[i, :i])
        u = xi @ W.C2.T + s @ W.D21.T + w_t @ W.D22.T
        self.xi = xi @ W.A1.T + s @ W.B1.T + w_t @ W.B2.T
        return u


@dataclass
class ContractionReport:
    passed: bool
    trials: int
    violations: int
    counterexamples: list

    def __bool__(self):
        return self.passed


def contraction_certificate(weights: RenWeights, trials: int = 10, horizon: int = 50, seed: int = 0,
                            sigma: str = "tanh", input_scale: float = 1.0,
                            state_scale: float = 3.0) -> ContractionReport:
    """Check incremental energy decay between trajectory pairs with equal inputs.

    For each trial two runs share the input but start from different states.
    With ``V_t = dxi_t^T M dxi_t`` (``M`` the contraction metric, ``V_{-1}`` the
    initial energy) every step must satisfy ``V_t <= V_{t-1} (1 + 1e-10)`` and the
    final energy must be strictly below the initial one. Growth smaller than the
    float64 round-off level of the states themselves is not counted.
    """
    rng = np.random.default_rng(seed)
    d = weights.dims
    M = weights.metric
    w = rng.normal(scale=input_scale, size=(trials, horizon, d.n))
    xa = rng.normal(scale=state_scale, size=(trials, d.q))
    xb = rng.normal(scale=state_scale, size=(trials, d.q))
    ta = ren_forward_batch(weights, w, sigma, xa)
    tb = ren_forward_batch(weights, w, sigma, xb)
    dxi = ta.xi - tb.xi
    V = np.einsum("kti,ij,ktj->kt", dxi, M, dxi)
    # once the runs merge to machine precision V is pure round-off; ignore growth below that floor
    mag = np.sum(ta.xi**2, axis=-1) + np.sum(tb.xi**2, axis=-1)
    floor = (64 * np.finfo(float).eps) ** 2 * np.linalg.norm(M, 2) * mag
    bad = []
    for k in range(trials):
        steps = np.flatnonzero(V[k, 1:] > V[k, :-1] * (1.0 + 1e-10) + floor[k, 1:])
        if steps.size:
            t = int(steps[0])
            bad.append({"trial": k, "t": t, "V_prev": float(V[k, t]), "V": float(V[k, t + 1])})
        elif V[k, 0] > 0 and not V[k, -1] < V[k, 0]:
            bad.append({"trial": k, "t": horizon - 1, "V_prev": float(V[k, 0]), "V": float(V[k, -1])})
    return ContractionReport(passed=not bad, trials=trials, violations=len(bad), counterexamples=bad)


def save_checkpoint(path, theta: RenTheta, sigma: str = "tanh", extra: Optional[dict] = None) -> None:
    """Write ``theta`` as JSON: a dims header then row-major matrix payloads."""
    d = theta.validate()
    doc = {
        "dims": {"q": d.q, "r": d.r, "n": d.n, "m": d.m, "epsilon": theta.epsilon, "activation": sigma},
        "blocks": {k: {"shape": list(np.shape(v)), "data": [float(x) for x in np.ravel(v)]}
                   for k, v in theta.blocks().items()},
    }
    if extra:
        doc["meta"] = extra
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Return ``(theta, sigma)`` from a checkpoint, validating every shape."""
    with open(path) as fh:
        doc = json.load(fh)
    hdr = doc["dims"]
    dims = RenDims(q=hdr["q"], r=hdr["r"], n=hdr["n"], m=hdr["m"])
    sigma = hdr.get("activation", "tanh")
    _act(sigma)
    shapes = theta_shapes(dims)
    blocks = {}
    for k, shape in shapes.items():
        entry = doc["blocks"][k]
        if tuple(entry["shape"]) != shape or len(entry["data"]) != shape[0] * shape[1]:
            raise ValueError(f"checkpoint block {k}: shape {entry['shape']} does not match dims {shape}")
        blocks[k] = np.asarray(entry["data"], dtype=float).reshape(shape)
    theta = RenTheta(epsilon=float(hdr["epsilon"]), **blocks)
    theta.validate(dims)
    return theta, sigma


__all__ = [
    "RenDims", "RenTheta", "RenWeights", "RenTrace", "RenOperator", "ContractionReport",
    "theta_to_weights", "init_theta", "ren_forward", "ren_forward_batch", "ren_backward",
    "weights_backward", "weights_vjp", "contraction_certificate", "save_checkpoint",
    "load_checkpoint", "theta_shapes", "ACTIVATIONS",
]
