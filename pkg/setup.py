"""Build script for the optional compiled kernel core.

The package works without the extension (a pure-Python twin of every kernel
is selected at import time), but training and the acceptance suite are an
order of magnitude faster with it. `-ffp-contract=off` keeps the compiled
kernels bit-identical to the Python fallback: no FMA contraction, no
fast-math reassociation.
"""

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "mea_lab.kernels._ckernels",
                sources=["src/mea_lab/kernels/_ckernels.pyx"],
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    # No Cython: install pure-Python only; kernels/__init__ falls back.
    pass

setup(ext_modules=ext_modules)
