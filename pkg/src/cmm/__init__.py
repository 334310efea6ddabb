"""Configurable multilingual transducer models at desk scale."""

import os as _os

# CMM_THREADS caps BLAS/numba threads; it must be applied before numpy loads.
_threads = _os.environ.get("CMM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
