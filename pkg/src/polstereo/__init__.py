"""Dense metric depth and albedo from one polarisation image plus a second view."""

__version__ = "0.1.0"

from ._kernels import BACKEND
from .config import PipelineConfig
from .pipeline import run_pipeline

__all__ = ["BACKEND", "PipelineConfig", "__version__", "run_pipeline"]
