"""Matrix-analytic solver, tail diagnostics and simulator for BMAP/GI/1 retrial queues.

Set ``BMAPRETRIAL_DISABLE_NUMBA=1`` before import to run the pure-numpy kernels.
"""
from ._kernels import BACKEND
from .arrivals import ServiceModel, build_kernel, validate_bmap

__version__ = "0.1.0"

__all__ = ["BACKEND", "ServiceModel", "build_kernel", "validate_bmap", "__version__"]
