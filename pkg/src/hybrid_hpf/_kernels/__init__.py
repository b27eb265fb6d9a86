"""Hot kernels with a compiled core and a pure-Python fallback.

The compiled extension ``_core`` is used when it imports; set
``HYBRID_HPF_PURE_PYTHON=1`` to force the fallback.  ``BACKEND`` names
the active implementation.
"""
import os

from hybrid_hpf._kernels import _fallback

if os.environ.get("HYBRID_HPF_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from hybrid_hpf._kernels import _core as _impl
        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _fallback
        BACKEND = "python"

toeplitz_assemble = _impl.toeplitz_assemble
rk4_periodic = _impl.rk4_periodic
lawson_cosim = _impl.lawson_cosim

__all__ = ["BACKEND", "toeplitz_assemble", "rk4_periodic", "lawson_cosim"]
