"""Variational tracking and prediction of moving objects with a disentangled state-space model."""
from .config import VtssiConfig, reduced_config
from .model import VTSSIModel, compute_elbo, predict

__version__ = "0.1.0"

__all__ = ["VtssiConfig", "VTSSIModel", "compute_elbo", "predict", "reduced_config"]
