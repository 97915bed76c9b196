"""Volumetric MRI super-resolution at desk scale.

Factor-2 k-space degradation and zero-filling, trilinear resampling, small
3D residual/dense networks on a numpy autodiff engine, full-reference
quality metrics, and a seeded phantom generator.
"""

__version__ = "0.1.0"

from .errors import (
                     ConsistencyError,
                     CorruptionError,
                     DegenerateInputError,
                     DivergenceError,
                     FormatError,
                     LeakageError,
                     ShapeError,
                     ValidationError,
                     VolsrError,
)
from .volgrid import (
                     Volume,
                     ZScoreStats,
                     read_volume,
                     trilinear_resample,
                     write_volume,
                     zscore_denormalize,
                     zscore_normalize,
)

__all__ = [
    "__version__",
    "Volume",
    "ZScoreStats",
    "read_volume",
    "write_volume",
    "zscore_normalize",
    "zscore_denormalize",
    "trilinear_resample",
    "VolsrError",
    "ValidationError",
    "DegenerateInputError",
    "FormatError",
    "CorruptionError",
    "ConsistencyError",
    "ShapeError",
    "DivergenceError",
    "LeakageError",
]
