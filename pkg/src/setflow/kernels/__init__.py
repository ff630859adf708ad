"""Hot numeric kernels, numba-jitted with a pure-numpy fallback.

The backend is chosen once at import time. Set ``SETFLOW_NUMBA=0`` (or
``false``/``off``/``no``) to force the numpy path; anything else uses numba
when it imports cleanly. Matrix products are not dispatched here: both
backends leave those to BLAS via numpy.
"""
import os

from . import numpy_impl

_flag = os.environ.get("SETFLOW_NUMBA", "1").strip().lower()

if _flag in ("0", "false", "off", "no"):
    _impl = numpy_impl
    BACKEND = "numpy"
else:
    try:
        from . import numba_impl as _impl
        BACKEND = "numba"
    except ImportError:
        _impl = numpy_impl
        BACKEND = "numpy"

silu_fwd = _impl.silu_fwd
silu_bwd = _impl.silu_bwd
elu_fwd = _impl.elu_fwd
elu_bwd = _impl.elu_bwd
sigmoid_fwd = _impl.sigmoid_fwd
sigmoid_bwd = _impl.sigmoid_bwd
softplus_fwd = _impl.softplus_fwd
softplus_bwd = _impl.softplus_bwd
layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
masked_softmax_fwd = _impl.masked_softmax_fwd
masked_softmax_bwd = _impl.masked_softmax_bwd
adam_update = _impl.adam_update
nn_min_dists = _impl.nn_min_dists

KERNEL_NAMES = [
    "silu_fwd", "silu_bwd", "elu_fwd", "elu_bwd",
    "sigmoid_fwd", "sigmoid_bwd", "softplus_fwd", "softplus_bwd",
    "layer_norm_fwd", "layer_norm_bwd",
    "masked_softmax_fwd", "masked_softmax_bwd",
    "adam_update", "nn_min_dists",
]
