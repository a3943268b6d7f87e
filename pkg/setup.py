"""Build script for the optional compiled kernel core.

The package works without the extension (a numpy fallback is selected at
import time); the Cython module just makes the patch-gather/scatter and
pooling inner loops faster.  If Cython or a C compiler is unavailable the
build degrades to pure Python instead of failing.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext = Extension(
        "cdsnet.kernels._fastcore",
        ["src/cdsnet/kernels/_fastcore.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    ext_modules = cythonize([ext], language_level=3)
except ImportError:
    pass

setup(ext_modules=ext_modules)
