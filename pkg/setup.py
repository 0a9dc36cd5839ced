"""Build hook: compile the optional Cython engine core.

The package works without the extension (a numpy fallback is selected at
import), so any failure here degrades to a pure-Python install instead of
aborting.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    ext_modules = cythonize(
        [
            Extension(
                "mixsim._core",
                sources=["src/mixsim/_core.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # noqa: BLE001 - any build-dep problem means "skip"
    print(f"mixsim: skipping compiled core ({exc!r}); pure-Python paths only")

setup(ext_modules=ext_modules)
