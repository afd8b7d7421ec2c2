"""Backend selection for the hot kernels.

The compiled extension is used when it is importable; setting the
environment variable ``RSM_MAPPO_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

from . import _kernels_py

if os.environ.get("RSM_MAPPO_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = _impl.BACKEND
ring_gaps = _impl.ring_gaps
ring_step = _impl.ring_step
ring_observe = _impl.ring_observe
discounted_reverse_cumsum = _impl.discounted_reverse_cumsum

__all__ = ["BACKEND", "ring_gaps", "ring_step", "ring_observe",
           "discounted_reverse_cumsum"]
