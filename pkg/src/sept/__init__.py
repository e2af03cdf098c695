"""SD-map priors for lane topology: a small numpy reference implementation.

Subpackages are imported lazily by callers; the most common entry points are
re-exported here.
"""

from .model import ConfigError, RunConfig, SeptModel, build_model
from .sdmap import Scene, SceneFormatError, parse_scene, serialize_scene
from .tensor import GradError, ShapeError, Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "GradError",
    "RunConfig",
    "Scene",
    "SceneFormatError",
    "SeptModel",
    "ShapeError",
    "Tensor",
    "backward",
    "build_model",
    "grad_check",
    "parse_scene",
    "serialize_scene",
]
