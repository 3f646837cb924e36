"""Finite-volume solver for an ion-transport cross-diffusion system with Poisson coupling."""
import os as _os

# cap native thread pools before numpy loads them
_threads = _os.environ.get("CROSSFLUX_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
