"""Build script: compiles the optional Cython decoder kernel.

The package is fully functional without the compiled extension (a numpy
fallback is selected at import time), so any failure here degrades to a
pure-Python build instead of aborting the install.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "facspeech.kernels._viterbi_cy",
                sources=["src/facspeech/kernels/_viterbi_cy.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level="3",
    )
except Exception as exc:  # pragma: no cover - build-environment dependent
    print(f"facspeech: skipping Cython kernel build ({exc}); "
          "the pure-Python fallback will be used")

setup(ext_modules=ext_modules)
