"""Kernel backend selection.

The hot convolution/pooling kernels exist twice: a Cython extension
(``_cyops``) and a pure-NumPy fallback. The extension is preferred when it
imports cleanly; set ``MIFC_BACKEND=numpy`` or ``MIFC_BACKEND=cython`` to
force one side. Results agree between backends up to floating-point
summation order; within one backend they are bit-reproducible.
"""

import os
from contextlib import contextmanager

from . import numpy_backend

try:
    from threadpoolctl import threadpool_limits as _threadpool_limits
except ImportError:  # pragma: no cover
    _threadpool_limits = None


def single_thread_blas():
    """Limit BLAS pools to one thread for the enclosed block.

    The training graph issues many small GEMMs; on small machines the BLAS
    worker spin-wait costs more than the parallelism buys (measured ~2x).
    """
    if _threadpool_limits is None:  # pragma: no cover
        @contextmanager
        def _noop():
            yield
        return _noop()
    return _threadpool_limits(limits=1, user_api="blas")

_requested = os.environ.get("MIFC_BACKEND", "auto").lower()

if _requested not in ("auto", "cython", "numpy"):
    raise ValueError(f"MIFC_BACKEND must be auto|cython|numpy, got {_requested!r}")

if _requested == "numpy":
    impl = numpy_backend
else:
    try:
        from . import _cyops as impl  # type: ignore[no-redef]
    except ImportError:
        if _requested == "cython":
            raise
        impl = numpy_backend

BACKEND = impl.NAME

conv2d_fwd = impl.conv2d_fwd
conv2d_bwd = impl.conv2d_bwd
depthwise_fwd = impl.depthwise_fwd
depthwise_bwd = impl.depthwise_bwd
maxpool_fwd = impl.maxpool_fwd
maxpool_bwd = impl.maxpool_bwd
bn_fwd_train = impl.bn_fwd_train
bn_bwd_train = impl.bn_bwd_train
