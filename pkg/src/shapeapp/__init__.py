"""Joint shape and appearance models learned from unannotated images."""

from shapeapp.core import (
    Grid,
    HyperParams,
    ImageDataset,
    LatentState,
    ModelState,
    init_latents,
    validate_hyper,
)

__version__ = "0.1.0"

__all__ = [
    "Grid",
    "HyperParams",
    "ImageDataset",
    "LatentState",
    "ModelState",
    "init_latents",
    "validate_hyper",
]
