"""Build the optional compiled kernel core.

A failed compile is not fatal: the package falls back to numpy kernels.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "irrcurr._kernels",
                ["src/irrcurr/_kernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3", "-march=native", "-ffast-math"],
                libraries=["mvec", "m"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # pragma: no cover
    print(f"irrcurr: building without compiled kernels ({exc})", file=sys.stderr)

setup(ext_modules=ext_modules)
