"""Build script: compiles the optional fast kernels unless PBVOTE_PURE_PYTHON=1.

The package works without the extension (a numpy fallback is selected at
import time); the compiled core only accelerates the dense forward/backward
kernels that dominate attack and training loops.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("PBVOTE_PURE_PYTHON", "0") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "pbvote._kernels",
                    ["src/pbvote/_kernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
