"""Post-training quantization with mixed reconstruction granularity.

Adjacent reconstruction modules whose capacities differ sharply are merged
before rounding is optimised, which damps the loss oscillation a purely
block-wise reconstruction shows.
"""

from .capacity import CapacityVector, capacity_vector, mod_cap
from .graph import LayerSpec, ModelGraph, ModuleSpec, ShapeError
from .model_io import (
    CalibrationSet,
    generate_calibration,
    generate_synthetic_model,
    load_calibration,
    load_model,
    save_model,
)
from .partition import GranularityScheme, apply_scheme, build_modules
from .reconstruction import ReconConfig, ReconstructionReport, run_method, run_pipeline
from .solver import score_pairs, select_topk

__version__ = "0.1.0"

__all__ = [
    "CalibrationSet",
    "CapacityVector",
    "GranularityScheme",
    "LayerSpec",
    "ModelGraph",
    "ModuleSpec",
    "ReconConfig",
    "ReconstructionReport",
    "ShapeError",
    "apply_scheme",
    "build_modules",
    "capacity_vector",
    "generate_calibration",
    "generate_synthetic_model",
    "load_calibration",
    "load_model",
    "mod_cap",
    "run_method",
    "run_pipeline",
    "save_model",
    "score_pairs",
    "select_topk",
]
