"""Build script for the optional compiled ray-trace kernel.

The pure-Python kernel is always available; if Cython or a C compiler is
missing the extension is skipped and the package still installs.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("CAVITYARRAY_NO_EXT", "") not in ("1", "true", "yes"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "cavityarray.raytrace._ckernel",
                    ["src/cavityarray/raytrace/_ckernel.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
