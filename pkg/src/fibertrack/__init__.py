"""Diffusion MRI tensor fitting, Bayesian fiber tracking and a learned orientation estimator."""
from .dwi import (DwiVolume, GradientTable, PhantomSpec, b_value, default_table,
                  generate_phantom)
from .dti import TensorField, fit_tensor, fit_volume
from .errors import FibertrackError
from .sphere import build_router, icosphere, route
from .tracking import (TrackerConfig, TrackingSession, connectivity_map,
                       track_deterministic, track_probabilistic)

__version__ = "0.1.0"

__all__ = [
    "DwiVolume", "GradientTable", "PhantomSpec", "b_value", "default_table", "generate_phantom",
    "TensorField", "fit_tensor", "fit_volume", "FibertrackError", "build_router", "icosphere",
    "route", "TrackerConfig", "TrackingSession", "connectivity_map", "track_deterministic",
    "track_probabilistic",
]
