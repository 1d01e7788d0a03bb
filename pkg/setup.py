"""Build script for the optional compiled attention kernels.

The package is fully functional without the extension (a numpy fallback is
selected at import time); building it just makes the per-token attention
loops run as compiled code.
"""

from setuptools import Extension, setup

try:
    import numpy
    from Cython.Build import cythonize
except ImportError:  # pure-python install
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "refilter.encoder._kernels_cy",
                sources=["src/refilter/encoder/_kernels_cy.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
