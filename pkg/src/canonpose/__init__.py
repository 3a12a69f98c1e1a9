"""Two-stage multi-view body fitting in a canonical parameter space."""

__version__ = "0.1.0"

from .body_model import BodyModel, BodyParams, load_model, load_toy_model  # noqa: E402
from .fitting import CanonicalParams, FitConfig, run_pipeline  # noqa: E402
from .geometry import CameraIntrinsics  # noqa: E402
from .observations import Detection2D  # noqa: E402
from .synth import SceneConfig, generate_scene  # noqa: E402

__all__ = [
    "BodyModel",
    "BodyParams",
    "CameraIntrinsics",
    "CanonicalParams",
    "Detection2D",
    "FitConfig",
    "SceneConfig",
    "generate_scene",
    "load_model",
    "load_toy_model",
    "run_pipeline",
]
