"""Stabilizing neural controllers for nonlinear plants: a base controller plus a
contractive recurrent operator fed with reconstructed disturbances."""
import os as _os

# thread caps must be in place before numpy loads its BLAS
_threads = _os.environ.get("NEURSLS_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from .signals import CausalOperator, Signal, check_causality, lp_norm, truncate  # noqa: E402
from .ren import RenDims, RenOperator, RenTheta, contraction_certificate, theta_to_weights  # noqa: E402
from .plant import DisturbanceModel, LinearPlant, VehicleParams, VehiclePlant, vehicle_step  # noqa: E402
from .sls import NeurSlsController, check_achievability, completeness_construct, rollout  # noqa: E402
from .training import StageLoss, TrainConfig, gradcheck, train  # noqa: E402

__all__ = [
    "Signal", "CausalOperator", "check_causality", "lp_norm", "truncate",
    "RenDims", "RenTheta", "RenOperator", "theta_to_weights", "contraction_certificate",
    "DisturbanceModel", "LinearPlant", "VehicleParams", "VehiclePlant", "vehicle_step",
    "NeurSlsController", "rollout", "check_achievability", "completeness_construct",
    "StageLoss", "TrainConfig", "train", "gradcheck",
]
