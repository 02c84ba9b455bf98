"""2D finite-element shape optimization with space-mapping correction.

The package optimizes shapes by repeatedly solving a cheap coarse model and
correcting the iterates against simulations of an accurate fine model, which
may run in-process or behind a file-based co-simulation protocol.
"""

__version__ = "0.1.0"

from . import errors
from .mesh import (
    Deformation,
    Mesh,
    apply_deformation,
    generate_disk_in_square,
    generate_ellipse_in_square,
    generate_rectangle,
    inverse_retraction,
    quality,
    transport,
)

__all__ = [
    "errors",
    "Mesh",
    "Deformation",
    "apply_deformation",
    "inverse_retraction",
    "transport",
    "quality",
    "generate_disk_in_square",
    "generate_ellipse_in_square",
    "generate_rectangle",
]
