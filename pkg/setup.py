"""Build script for the optional compiled kernel extension.

The package works without the extension (a vectorized numpy fallback is
selected at import time), so a failed compile only costs speed.
Build in place for development with:

    python setup.py build_ext --inplace
"""

import sys

from setuptools import Extension, setup


def _extensions():
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError as exc:
        print(f"skipping compiled kernels ({exc})", file=sys.stderr)
        return []
    return cythonize(
        [
            Extension(
                "cryptgnn.kernels._core",
                ["src/cryptgnn/kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )


setup(ext_modules=_extensions())
