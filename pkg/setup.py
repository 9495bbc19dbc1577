"""Builds the optional Cython SGM kernel.

The package works without it (a pure-numpy fallback is selected at
import); build errors therefore only disable the compiled backend.
"""

import numpy
from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        "src/bino/kernels/_sgm_cy.pyx",
        language_level=3,
        compiler_directives={"boundscheck": False, "wraparound": False,
                             "cdivision": True},
    )
except ImportError:
    pass

setup(
    ext_modules=ext_modules,
    include_dirs=[numpy.get_include()],
)
