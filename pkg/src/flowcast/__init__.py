"""Flow-matching multi-modal trajectory prediction on synthetic fork scenes.

Pipeline: a scene generator produces agent histories, lane-fork maps, and
ground-truth futures; a transformer encoder/decoder denoiser is trained
with a flow-matching objective plus classification and Plackett-Luce
ranking losses; an ODE sampler (one step suffices) produces candidate
trajectories that NMS reduces to K final predictions, scored with
standard displacement and mean-average-precision metrics.
"""

from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    FlowcastError,
    NumericsError,
)

__all__ = [
    "ConfigError",
    "DataError",
    "DimensionError",
    "FlowcastError",
    "NumericsError",
]

__version__ = "0.1.0"
