"""Anisotropic natural-language message passing for text-attributed graphs."""

__version__ = "0.1.0"

from .graph import TextAttributedGraph, generate_synthetic, load_dataset  # noqa: F401
from .gateway import BackendConfig, ChatRequest, Gateway  # noqa: F401
from .gnn import ExperimentReport, TrainConfig  # noqa: F401
