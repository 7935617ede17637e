"""Multimodal transformer for dichotomised stroke-outcome prediction from a 3D NCCT volume and clinical features."""

__version__ = "0.1.0"

from .model import TranSOP, TranSOPConfig, load_checkpoint, preset, save_checkpoint  # noqa: E402

__all__ = ["TranSOP", "TranSOPConfig", "load_checkpoint", "preset", "save_checkpoint", "__version__"]
