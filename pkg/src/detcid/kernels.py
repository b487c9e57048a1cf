"""Kernel backend selection.

Imports the compiled core when available, otherwise the numpy fallback.
Set ``DETCID_PURE_PYTHON=1`` to force the fallback. Both backends produce
identical results; the env var mostly exists for debugging and the
benchmark in ``benchmarks/bench_kernels.py``.
"""

from __future__ import annotations

import os

if os.environ.get("DETCID_PURE_PYTHON", "") == "1":
    from detcid import _kernels_np as _impl
else:
    try:
        from detcid import _speedups as _impl  # type: ignore[attr-defined]
    except ImportError:
        from detcid import _kernels_np as _impl

BACKEND: str = _impl.BACKEND

warp_bilinear = _impl.warp_bilinear
warp_nearest = _impl.warp_nearest
masked_ssd_scan = _impl.masked_ssd_scan
seam_cut_vertical = _impl.seam_cut_vertical
jacobi_sweep = _impl.jacobi_sweep
