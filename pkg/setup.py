"""Build script: compiles the Cython kernel core when possible.

The package is fully functional without the extension; dynslim.kernels
falls back to the NumPy implementations at import time. Any build failure
here therefore degrades to a pure-Python install instead of aborting.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "dynslim.kernels._ckernels",
                ["src/dynslim/kernels/_ckernels.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # pragma: no cover - build-env dependent
    sys.stderr.write(f"warning: skipping compiled kernels ({exc}); "
                     "falling back to NumPy backend\n")

setup(ext_modules=ext_modules)
