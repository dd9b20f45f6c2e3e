"""Checkpoint exporter: torchvision VGG-19 / Inception-v3 state dicts to
toolkit weight containers plus reference-activation fixtures."""

from .export import FIXTURE_SEED, build_model, capture_fixture, collect_tensors, export_weights
from .maps import ARCHITECTURES, ExportError, ExportMap, build_export_map, cut_modules

__version__ = "0.1.0"

__all__ = [
    "ARCHITECTURES",
    "FIXTURE_SEED",
    "ExportError",
    "ExportMap",
    "build_export_map",
    "build_model",
    "capture_fixture",
    "collect_tensors",
    "cut_modules",
    "export_weights",
    "__version__",
]
