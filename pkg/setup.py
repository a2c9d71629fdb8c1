"""Build script for the compiled event-loop kernel.

The extension links against numpy's static npyrandom library so the kernel
can drive a Philox bit generator through the C distribution functions; this
keeps its draws bit-identical to the pure-Python backend, which uses the same
generator through numpy's Python API. -ffp-contract=off forbids FMA
contraction so both backends round every intermediate the same way.
"""

from os.path import dirname, join

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

kernels = Extension(
    "cubediff._kernels",
    ["src/cubediff/_kernels.pyx"],
    include_dirs=[np.get_include()],
    library_dirs=[join(dirname(np.random.__file__), "lib")],
    libraries=["npyrandom"],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    extra_compile_args=["-O3", "-ffp-contract=off"],
)

setup(ext_modules=cythonize([kernels], language_level="3"))
