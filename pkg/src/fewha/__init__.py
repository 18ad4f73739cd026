"""Matrix-free wavelet-domain tomographic wavefront reconstruction."""

from .atmosphere import (
    AtmosphereTruth,
    LoopResult,
    QualityEvaluator,
    QualityRecord,
    evaluate_quality,
    generate_atmosphere,
    run_closed_loop,
    synthesize_measurements,
)
from .config import (
    ConfigError,
    DmConfig,
    GuideStar,
    LayerConfig,
    SystemGeometry,
    WfsConfig,
    compute_active_subapertures,
    layer_extent,
    load_config,
    load_preset,
)
from .operators import OutOfGridError, TomographyOperators
from .reconstructor import Reconstructor, ReconstructorState, SolverError, pcg_solve, warm_restart_reset
from .wavelet import dwt_forward, dwt_inverse, dwt_inverse_transposed

__version__ = "0.1.0"

__all__ = [
    "AtmosphereTruth",
    "ConfigError",
    "DmConfig",
    "GuideStar",
    "LayerConfig",
    "LoopResult",
    "OutOfGridError",
    "QualityEvaluator",
    "QualityRecord",
    "Reconstructor",
    "ReconstructorState",
    "SolverError",
    "SystemGeometry",
    "TomographyOperators",
    "WfsConfig",
    "compute_active_subapertures",
    "dwt_forward",
    "dwt_inverse",
    "dwt_inverse_transposed",
    "evaluate_quality",
    "generate_atmosphere",
    "layer_extent",
    "load_config",
    "load_preset",
    "pcg_solve",
    "run_closed_loop",
    "synthesize_measurements",
    "warm_restart_reset",
]
