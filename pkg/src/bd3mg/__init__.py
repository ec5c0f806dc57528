"""Asynchronous block-distributed majorize-minimize memory-gradient solver
with a depth-variant 3D deblurring application.

The hot convolution kernels live in a compiled extension when available;
``bd3mg.kernels.backend_name()`` reports which implementation is active.
"""

from .kernels import USING_COMPILED, backend_name

__version__ = "0.1.0"

__all__ = ["USING_COMPILED", "backend_name", "__version__"]
