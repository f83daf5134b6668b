"""Scenario files: vehicles, disturbances, loss weights, REN size and training setup."""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import numpy as np

from .plant import DisturbanceModel, Drag, VehicleParams, VehiclePlant, vehicle_base_controller
from .ren import ACTIVATIONS, RenDims
from .training import LossWeights, StageLoss, TrainConfig

BUILTIN = ("mountains", "swapping")


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    id: str
    params: VehicleParams
    starts: np.ndarray
    radii: np.ndarray
    disturbances: DisturbanceModel
    weights: LossWeights
    train_config: TrainConfig
    q: int
    r: int
    epsilon: float = 1e-3
    activation: str = "tanh"
    snapshots: list = field(default_factory=list)
    validation: dict = field(default_factory=dict)
    source: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for name, pts in (("starts", self.starts), ("targets", self.params.targets)):
            diff = pts[:, None, :] - pts[None, :, :]
            dist = np.linalg.norm(diff, axis=-1) + np.eye(len(pts))
            if np.any(dist == 0):
                raise ScenarioError(f"agent {name} must be pairwise distinct")
        if self.activation not in ACTIVATIONS:
            raise ScenarioError(f"unknown activation {self.activation!r}")

    @property
    def horizon(self) -> int:
        return self.train_config.horizon

    @property
    def plant(self) -> VehiclePlant:
        return VehiclePlant(self.params)

    @property
    def base(self):
        return vehicle_base_controller(self.params)

    @property
    def stage_loss(self) -> StageLoss:
        return StageLoss(self.weights, self.params.setpoint, 2 * self.params.count, self.params.count)

    @property
    def ren_dims(self) -> RenDims:
        N = self.params.count
        return RenDims(q=self.q, r=self.r, n=4 * N, m=2 * N)

    @property
    def x0_nominal(self) -> np.ndarray:
        x = np.zeros((self.params.count, 4))
        x[:, :2] = self.starts
        return x.ravel()

    def sample(self, S: int, T: int, rng=None) -> np.ndarray:
        return self.disturbances.sample(S, T, rng)

    def config_hash(self) -> str:
        blob = json.dumps(self.source, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_overrides(self, **train) -> "Scenario":
        """Copy with training fields replaced (``epochs``, ``seed``, ...)."""
        doc = copy.deepcopy(self.source)
        doc.setdefault("train", {}).update({k: v for k, v in train.items() if v is not None})
        return from_dict(doc)


def _require(doc: dict, key: str):
    if key not in doc:
        raise ScenarioError(f"scenario is missing required field {key!r}")
    return doc[key]


def from_dict(doc: dict) -> Scenario:
    try:
        agents = _require(doc, "agents")
        starts = np.array([a["start"] for a in agents], dtype=float)
        targets = np.array([a["target"] for a in agents], dtype=float)
        radii = np.array([a.get("radius", 0.5) for a in agents], dtype=float)
        params = VehicleParams(
            targets=targets,
            mass=float(_require(doc, "mass")),
            ts=float(_require(doc, "ts")),
            drag=Drag.from_dict(_require(doc, "drag")),
            base_gains=np.asarray(_require(doc, "base_gains"), dtype=float),
        )
        lw = dict(_require(doc, "loss_weights"))
        if "safety_distance" not in lw:
            lw["safety_distance"] = 2.0 * float(radii.max())
        weights = LossWeights(obstacles=[dict(center=o["center"], width=o["width"]) for o in doc.get("obstacles", [])],
                              **lw)
        dist = doc.get("disturbance", {})
        N = len(agents)
        x0 = np.zeros((N, 4))
        x0[:, :2] = starts
        std0 = np.zeros((N, 4))
        std0[:, :2] = float(dist.get("start_std", 0.0))
        proc = float(dist.get("process_std", 0.0))
        disturbances = DisturbanceModel(mean0=x0.ravel(), cov0=np.diag(std0.ravel() ** 2),
                                        cov=np.eye(4 * N) * proc**2, seed=int(dist.get("seed", 0)))
        tr = dict(doc.get("train", {}))
        config = TrainConfig(horizon=int(_require(doc, "horizon_steps")),
                             batch_size=int(tr.get("batch_size", 8)), epochs=int(tr.get("epochs", 500)),
                             lr=float(tr.get("lr", 1e-3)), seed=int(tr.get("seed", 0)),
                             optimizer=tr.get("optimizer", "adam"),
                             checkpoint_every=int(tr.get("checkpoint_every", 50)),
                             validation_size=int(tr.get("validation_size", 16)))
        ren = doc.get("ren", {})
        return Scenario(
            id=str(doc.get("id", "scenario")), params=params, starts=starts, radii=radii,
            disturbances=disturbances, weights=weights, train_config=config,
            q=int(ren.get("q", 8)), r=int(ren.get("r", 8)), epsilon=float(ren.get("epsilon", 1e-3)),
            activation=ren.get("activation", "tanh"), snapshots=list(doc.get("snapshots", [])),
            validation=dict(doc.get("validation", {})), source=copy.deepcopy(doc),
        )
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"invalid scenario: {exc}") from exc


def load(path_or_name: str) -> Scenario:
    """Load a scenario from a JSON path or a built-in name."""
    if path_or_name in BUILTIN and not os.path.exists(path_or_name):
        text = resources.files("neursls.scenarios").joinpath(f"{path_or_name}.json").read_text()
    else:
        with open(path_or_name) as fh:
            text = fh.read()
    # JSONDecodeError carries line/column; callers report it
    return from_dict(json.loads(text))


def builtin_path(name: str) -> Optional[str]:
    if name not in BUILTIN:
        return None
    return str(resources.files("neursls.scenarios").joinpath(f"{name}.json"))
