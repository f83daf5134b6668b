"""Closed-loop metrics on scenario rollouts: cumulative loss, convergence, distances."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .ren import RenOperator, RenTheta
from .signals import ZeroOperator
from .sls import NeurSlsController, rollout_batch


def check_compatible(scenario, theta: RenTheta) -> None:
    """Raise ``ValueError`` if ``theta`` cannot drive the scenario's plant."""
    d, want = theta.dims, scenario.ren_dims
    if (d.n, d.m) != (want.n, want.m):
        raise ValueError(f"checkpoint maps {d.n}->{d.m} but scenario needs {want.n}->{want.m}")


def controller(scenario, theta: Optional[RenTheta] = None, sigma: str = "tanh",
               w_source: str = "injected") -> NeurSlsController:
    """Base controller plus REN (or the zero operator when ``theta`` is None)."""
    plant = scenario.plant
    if theta is None:
        emme = ZeroOperator(plant.state_dim, plant.input_dim)
    else:
        check_compatible(scenario, theta)
        emme = RenOperator(theta, sigma)
    return NeurSlsController(scenario.base, emme, plant, w_source=w_source)


def simulate(scenario, theta: Optional[RenTheta], w, sigma: str = "tanh"):
    """Batched closed-loop rollouts; returns ``(x, u, v)`` of shape ``(S, T+1, .)``."""
    return rollout_batch(controller(scenario, theta, sigma), w)


def cumulative_loss(scenario, x, u) -> np.ndarray:
    """``sum_{k<=t} l(x_k, u_k)`` per sample, shape ``(S, T+1)``."""
    return np.cumsum(scenario.stage_loss(x, u), axis=-1)


def convergence_increment(cum, frac: float = 0.2) -> np.ndarray:
    """Relative growth of the cumulative loss over the last ``frac`` of the horizon.

    Zero when the total loss is zero.
    """
    cum = np.atleast_2d(cum)
    last = cum.shape[1] - 1
    k = last - int(round(frac * last))
    total = cum[:, last]
    inc = cum[:, last] - cum[:, k]
    return np.divide(inc, total, out=np.zeros_like(total), where=total > 0)


def positions(scenario, x) -> np.ndarray:
    """Agent positions ``(..., N, 2)`` from stacked states."""
    x = np.asarray(x)
    return x.reshape(x.shape[:-1] + (scenario.params.count, 4))[..., :2]


def terminal_errors(scenario, x, t: int = -1) -> np.ndarray:
    """Distance of each agent to its target at step ``t``, shape ``(S, N)``."""
    p = positions(scenario, np.asarray(x)[:, t])
    return np.linalg.norm(p - scenario.params.targets, axis=-1)


def min_pairwise_distance(scenario, x) -> np.ndarray:
    """Smallest inter-agent distance over the whole rollout, per sample."""
    p = positions(scenario, x)
    N = p.shape[-2]
    if N < 2:
        return np.full(p.shape[0], np.inf)
    i, j = np.triu_indices(N, 1)
    d = np.linalg.norm(p[..., i, :] - p[..., j, :], axis=-1)
    return d.reshape(d.shape[0], -1).min(axis=1)


def min_clearance(scenario, x) -> np.ndarray:
    """Smallest gap between agent balls (distance minus the two radii) over the rollout, per sample."""
    p = positions(scenario, x)
    N = p.shape[-2]
    if N < 2:
        return np.full(p.shape[0], np.inf)
    i, j = np.triu_indices(N, 1)
    gap = np.linalg.norm(p[..., i, :] - p[..., j, :], axis=-1) - (scenario.radii[i] + scenario.radii[j])
    return gap.reshape(gap.shape[0], -1).min(axis=1)
