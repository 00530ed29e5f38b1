import os

from setuptools import setup, Extension

ext_modules = []
if os.environ.get("MOTION2INFARCT_NO_EXT", "") in ("", "0"):
    try:
        import numpy
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "motion2infarct._kdtree",
                    ["src/motion2infarct/_kdtree.pyx"],
                    include_dirs=[numpy.get_include()],
                    # keep a*a + b*b free of FMA so distances match the fallback bit-for-bit
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
