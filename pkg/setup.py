"""Build script for the optional compiled kernel core.

The extension accelerates the synthesis hot loops (warping, quilting SSD
scans, seam DP, diffusion sweeps). If it fails to build, the package still
works through the pure-numpy fallback in ``detcid._kernels_np``.
"""

import numpy as np
from setuptools import setup, Extension

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "detcid._speedups",
                sources=["src/detcid/_speedups.pyx"],
                include_dirs=[np.get_include()],
                # -ffp-contract=off keeps float results bit-identical to the
                # numpy fallback (no FMA contraction).
                extra_compile_args=["-O3", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level="3",
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
