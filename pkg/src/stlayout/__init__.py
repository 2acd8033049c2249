"""Spatial-temporal layout-guided attention for multi-attribute video editing.

A small numpy engine: layout condition maps, cross-frame positive/negative
logit modulation, discrete text-to-attribute cross-attention control and a toy
DDIM editing loop with latent blending.
"""

__version__ = "0.1.0"

from .errors import BoundsError, NumericalError, ShapeError, ValidationError

__all__ = [
    "__version__",
    "BoundsError",
    "NumericalError",
    "ShapeError",
    "ValidationError",
]
