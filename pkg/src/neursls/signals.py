"""Finite-horizon signals and causal operators.

A :class:`Signal` is the truncation ``x_{T:0}`` of a vector sequence, stored as
an immutable ``(horizon, dim)`` array. Operators map signals to signals of the
same horizon; every operator in the package is causal.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class Signal:
    """Immutable finite-horizon vector signal indexed ``t = 0..horizon-1``."""

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.array(data, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2:
            raise ValueError(f"signal data must be 2-D (horizon, dim), got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("signal must have positive horizon and dimension")
        if not np.all(np.isfinite(arr)):
            raise ValueError("signal entries must be finite")
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def zeros(cls, horizon: int, dim: int) -> "Signal":
        return cls(np.zeros((horizon, dim)))

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def horizon(self) -> int:
        return self._data.shape[0]

    @property
    def dim(self) -> int:
        return self._data.shape[1]

    def __len__(self) -> int:
        return self.horizon

    def __getitem__(self, t) -> np.ndarray:
        return self._data[t]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Signal):
            return NotImplemented
        return self._data.shape == other._data.shape and bool(np.array_equal(self._data, other._data))

    def __hash__(self):
        return hash((self._data.shape, self._data.tobytes()))

    def __add__(self, other: "Signal") -> "Signal":
        return Signal(self._data + _as_array(other))

    def __sub__(self, other: "Signal") -> "Signal":
        return Signal(self._data - _as_array(other))

    def __neg__(self) -> "Signal":
        return Signal(-self._data)

    def __mul__(self, alpha: float) -> "Signal":
        return Signal(float(alpha) * self._data)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Signal(horizon={self.horizon}, dim={self.dim})"

    def to_csv(self, path=None) -> str:
        """Serialize as CSV with header ``t,x0,x1,...``; returns the text."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t"] + [f"x{i}" for i in range(self.dim)])
        for t, row in enumerate(self._data):
            writer.writerow([t] + [repr(float(v)) for v in row])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, source) -> "Signal":
        """Parse CSV text or a file path written by :meth:`to_csv`."""
        if isinstance(source, str) and "\n" in source:
            text = source
        else:
            with open(source, newline="") as fh:
                text = fh.read()
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or not rows[0] or rows[0][0] != "t":
            raise ValueError("signal CSV must start with a header row 't,x0,...'")
        body = rows[1:]
        for k, row in enumerate(body):
            if int(row[0]) != k:
                raise ValueError(f"non-contiguous time index at row {k + 1}")
        return cls([[float(v) for v in row[1:]] for row in body])


def _as_array(s) -> np.ndarray:
    return s.data if isinstance(s, Signal) else np.asarray(s, dtype=float)


def lp_norm(s: Signal, p=2) -> float:
    """ℓp norm of a signal using the Euclidean norm at each step.

    ``p`` is a positive integer or ``math.inf``.
    """
    if not isinstance(s, Signal):
        s = Signal(s)
    if s.horizon == 0:
        raise ValueError("empty signal")
    if p != math.inf and (p < 1 or int(p) != p):
        raise ValueError(f"p must be a positive integer or inf, got {p!r}")
    # rescale before squaring and before raising to p, so huge entries do not overflow
    big = np.abs(s.data).max()
    if big == 0.0:
        return 0.0
    step_norms = np.linalg.norm(s.data / big, axis=1)
    if p == math.inf:
        return float(big * step_norms.max())
    scale = step_norms.max()
    return float(big * scale * np.sum((step_norms / scale) ** p) ** (1.0 / p))


def truncate(s: Signal, j: int, i: int) -> Signal:
    """Return steps ``i..j`` (inclusive) of ``s``, written ``x_{j:i}``."""
    if not (0 <= i <= j <= s.horizon - 1):
        raise IndexError(f"truncate({j}, {i}) out of range for horizon {s.horizon}")
    return Signal(s.data[i : j + 1])


class CausalOperator:
    """Causal map between signals of equal horizon.

    Subclasses implement :meth:`apply`. Operators that carry internal state
    override :meth:`stepper` with an O(1)-per-step online evaluator; the
    default re-evaluates ``apply`` on the growing prefix, which is exact for
    any causal operator.
    """

    in_dim: int
    out_dim: int

    def apply(self, s: Signal) -> Signal:
        raise NotImplementedError

    def __call__(self, s: Signal) -> Signal:
        return self.apply(s)

    def stepper(self) -> "Stepper":
        return _PrefixStepper(self)


class Stepper:
    """Online evaluator: feed ``w_t`` one step at a time, get the output at ``t``."""

    def step(self, w_t: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class _PrefixStepper(Stepper):
    # accepts a single vector or a batch of shape (S, dim)
    def __init__(self, op: CausalOperator):
        self.op = op
        self.history: list[np.ndarray] = []

    def step(self, w_t):
        w_t = np.asarray(w_t, dtype=float)
        self.history.append(np.atleast_2d(w_t))
        hist = np.stack(self.history, axis=1)
        out = np.stack([self.op.apply(Signal(h)).data[-1] for h in hist])
        return out if w_t.ndim == 2 else out[0]


class FunctionOperator(CausalOperator):
    """Wrap a plain ``Signal -> Signal`` function as an operator.

    Causality is the caller's responsibility; see :func:`check_causality`.
    """

    def __init__(self, fn: Callable[[Signal], Signal], in_dim: int, out_dim: int, name: str = ""):
        self.fn = fn
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.name = name or getattr(fn, "__name__", "fn")

    def apply(self, s: Signal) -> Signal:
        out = self.fn(s)
        if not isinstance(out, Signal):
            out = Signal(out)
        if out.horizon != s.horizon:
            raise ValueError(f"{self.name}: output horizon {out.horizon} != input horizon {s.horizon}")
        return out

    def __repr__(self):
        return f"FunctionOperator({self.name}, {self.in_dim}->{self.out_dim})"


class ZeroOperator(CausalOperator):
    def __init__(self, in_dim: int, out_dim: int):
        self.in_dim = in_dim
        self.out_dim = out_dim

    def apply(self, s):
        return Signal.zeros(s.horizon, self.out_dim)

    def stepper(self):
        out_dim = self.out_dim

        class _Zero(Stepper):
            def step(self, w_t):
                return np.zeros(np.shape(w_t)[:-1] + (out_dim,))

        return _Zero()


class IdentityOperator(CausalOperator):
    def __init__(self, dim: int):
        self.in_dim = self.out_dim = dim

    def apply(self, s):
        return s


@dataclass
class CausalityReport:
    passed: bool
    trials: int
    failures: int = 0
    # (trial, prefix end t, first disagreeing index, abs difference)
    counterexample: Optional[tuple] = None
    details: list = field(default_factory=list)

    def __bool__(self):
        return self.passed


def check_causality(op: CausalOperator, trials: int = 100, horizon: int = 20,
                    seed: int = 0, tol: float = 1e-12) -> CausalityReport:
    """Probe ``op`` with input pairs that agree on a random prefix ``0..t``.

    A causal operator must produce outputs that agree on the same prefix.
    """
    rng = np.random.default_rng(seed)
    failures = 0
    first = None
    for k in range(trials):
        a = rng.normal(size=(horizon, op.in_dim))
        b = a.copy()
        t = int(rng.integers(0, max(horizon - 1, 1)))
        b[t + 1 :] = rng.normal(size=(horizon - t - 1, op.in_dim))
        ya = op.apply(Signal(a)).data
        yb = op.apply(Signal(b)).data
        diff = np.abs(ya[: t + 1] - yb[: t + 1]).max(axis=1)
        bad = np.flatnonzero(diff > tol)
        if bad.size:
            failures += 1
            if first is None:
                idx = int(bad[0])
                first = (k, t, idx, float(diff[idx]))
    return CausalityReport(passed=failures == 0, trials=trials, failures=failures, counterexample=first)
