"""Build the compiled event-loop core.

The package works without the extension (a pure-Python twin is selected at
import time), so a failed compile only costs speed. `python setup.py
build_ext --inplace` rebuilds in a source checkout.
"""

import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "svlv._core",
        ["src/svlv/_core.pyx"],
        language="c++",
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3", "-std=c++11"],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
