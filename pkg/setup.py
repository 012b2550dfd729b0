"""Builds the optional compiled patch-matching kernel.

The package works without it (pure numpy fallback); set MSLS_NO_EXT=1 to
skip the extension build entirely.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("MSLS_NO_EXT", "") in ("", "0"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("msls._patchmatch_ext", ["src/msls/_patchmatch_ext.pyx"],
                       include_dirs=[np.get_include()],
                       extra_compile_args=["-O3"])],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
