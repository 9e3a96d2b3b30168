"""Continuous light-field reconstruction from a single coded image.

Pipeline: a joint aperture-exposure coded camera observation of a 5x5-view
grayscale light field is fed to FeatNet, which produces an [H,W,D,C]
feature volume; a small NeRF-style MLP conditioned on trilinear volume
queries renders rays at arbitrary continuous viewpoints through volume
rendering. The whole chain is trainable end to end with the bundled
reverse-mode autodiff engine.
"""

from .coding import CodedImage, CodingPattern, encode_joint, encode_uncoded
from .lightfield import LightField, SceneSpec, load_lightfield, save_lightfield, synth_lightfield
from .rendering import RenderConfig, render_view
from .training import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "CodedImage", "CodingPattern", "encode_joint", "encode_uncoded",
    "LightField", "SceneSpec", "load_lightfield", "save_lightfield",
    "synth_lightfield", "RenderConfig", "render_view",
    "Checkpoint", "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
    "__version__",
]
