"""Builds the optional compiled replay kernel; the package works without it."""

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [Extension("evistream._replay", ["src/evistream/_replay.pyx"], include_dirs=[np.get_include()])],
        language_level="3",
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
