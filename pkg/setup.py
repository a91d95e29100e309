"""Build hook: compiles the discrete-event simulation kernel.

The package works without the extension (a pure-Python kernel is selected at
import time), so a failed compile degrades to a warning rather than an error.
"""

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        ["src/taskfarm/perfmodel/_kernel.pyx"],
        language_level=3,
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
except ImportError:
    import warnings

    warnings.warn("Cython unavailable; building without the compiled DES kernel")

setup(ext_modules=ext_modules)
