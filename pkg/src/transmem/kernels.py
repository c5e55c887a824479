"""Convolution kernel backend, chosen once at import.

The compiled extension is used when it was built; otherwise the numpy
implementation. Set ``TRANSMEM_KERNELS=python`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
im2col = _pykernels.im2col
col2im = _pykernels.col2im

if os.environ.get("TRANSMEM_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        im2col = _ckernels.im2col
        col2im = _ckernels.col2im
