"""Build script: compiles the optional Cython kernel extension.

The package works without the extension (a numpy fallback is selected at
import time), so any failure here degrades to a pure-Python install
instead of aborting.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext = Extension(
        "perronlab.kernels._compiled",
        ["src/perronlab/kernels/_compiled.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
    )
    ext_modules = cythonize(
        [ext],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # noqa: BLE001 - degrade to pure python on any build issue
    sys.stderr.write(
        f"perronlab: skipping compiled kernels ({exc}); "
        "the numpy fallback will be used\n"
    )

setup(ext_modules=ext_modules)
