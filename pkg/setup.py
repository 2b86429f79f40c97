import os

import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; raster falls back to numpy
    cythonize = None

ext_modules = []
if cythonize is not None and os.environ.get("DISTILL3D_NO_EXT") != "1":
    ext_modules = cythonize(
        [
            Extension(
                "distill3d._raster",
                [os.path.join("src", "distill3d", "_raster.pyx")],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
