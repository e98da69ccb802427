"""Build the optional compiled kernels; the package still installs without them."""

import os
import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    openmp = [] if sys.platform == "darwin" or os.environ.get("KINCROWD_NO_OPENMP") else ["-fopenmp"]
    ext_modules = cythonize(
        [
            Extension(
                "kincrowd._ckernels",
                ["src/kincrowd/_ckernels.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"] + openmp,
                extra_link_args=openmp,
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    print("Cython or numpy missing: installing without compiled kernels", file=sys.stderr)

setup(ext_modules=ext_modules)
