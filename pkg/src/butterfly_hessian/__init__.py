"""Linearithmic symmetric-matrix approximation with butterfly Givens rotations."""

from .butterfly import ButterflyProduct, DegenerateBlockError, GivensBlock, from_angles, pairing
from .factorization import (
    SymmetricFactorization,
    TrainConfig,
    TrainSample,
    average_angle,
    train,
    train_rotation_only,
)
from .synth import SyntheticSpec, haar_rotation, sample_hypercube, sample_unit_sphere, synthetic_hessian

__version__ = "0.1.0"
