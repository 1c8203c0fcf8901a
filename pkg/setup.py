"""Build script for the optional Cython kernel extension.

The package works without the extension (a numpy/math.fsum fallback is
selected at import time), so a failed compile degrades gracefully instead
of blocking installation.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext = Extension(
        "nerfdesk._kernels",
        ["src/nerfdesk/_kernels.pyx"],
        include_dirs=[np.get_include()],
        # Exact summation relies on IEEE-754 round-to-nearest; -ffast-math
        # would break it, so only -O3 is safe here.
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    ext_modules = cythonize([ext], language_level=3)
except Exception as exc:  # pragma: no cover - build-environment dependent
    sys.stderr.write(f"nerfdesk: skipping compiled kernels ({exc})\n")

setup(ext_modules=ext_modules)
