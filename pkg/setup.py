"""Build the optional compiled run loop; the package works without it."""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("PUSHSUM_GNE_NO_EXT", "") in ("", "0"):
    try:
        import numpy  # noqa: F401  (build-time presence check)
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("pushsum_gne._kernel", ["src/pushsum_gne/_kernel.pyx"], extra_compile_args=["-O3"])],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
