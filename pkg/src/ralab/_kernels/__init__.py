"""Hot numeric kernels with backend selection at import time.

The compiled Cython extension is preferred; the numpy reference is used when
the extension is unavailable or RALAB_NO_EXT is set. Both expose the same
functions and produce identical results.
"""

import os

from . import reference

if os.environ.get("RALAB_NO_EXT"):
    _impl = reference
else:
    try:
        from . import conv_cy as _impl
    except ImportError:
        _impl = reference

BACKEND = "cython" if _impl is not reference else "numpy"

conv_out_size = reference.conv_out_size
im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
