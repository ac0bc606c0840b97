"""Build script for the optional compiled kernels.

The package works without them; a failed or skipped build falls back to the
pure-Python kernels at import time.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("DRIVESIM_NO_EXT", "") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "drivesim.kernels._ckernels",
                    ["src/drivesim/kernels/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no -ffast-math / -march=native: results must match the
                    # Python kernels bit for bit
                    extra_compile_args=["-O2", "-ffp-contract=off"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
