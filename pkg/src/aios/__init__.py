"""Desk-scale multi-person whole-body pose and shape estimation."""

from .body_model import BodyModel, CameraModel, ParamSet, project, rodrigues
from .config import RunConfig
from .model import AiosModel, build_model
from .scene import SceneConfig, derive_boxes, generate_scene, horizontal_flip
from .template import build_template

__all__ = [
    "AiosModel",
    "BodyModel",
    "CameraModel",
    "ParamSet",
    "RunConfig",
    "SceneConfig",
    "build_model",
    "build_template",
    "derive_boxes",
    "generate_scene",
    "horizontal_flip",
    "project",
    "rodrigues",
]

__version__ = "0.1.0"
