"""Build script for the optional compiled XNOR-popcount core.

If Cython or a C compiler is unavailable the package still installs and
falls back to the numpy implementation in ``bnnx._xnor_py``.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("BNNX_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "bnnx._xnor",
                    ["src/bnnx/_xnor.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3", "-march=native"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3", "boundscheck": False, "wraparound": False},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
