import os

from setuptools import setup

# The taint kernel is an optional speedup: the package falls back to the pure
# Python implementation when the extension is absent or DNNLIFT_NO_NATIVE=1.
ext_modules = []
if os.environ.get("DNNLIFT_SKIP_EXT") != "1":
    try:
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "dnnlift._taintcore",
                    sources=["src/dnnlift/_taintcore.pyx"],
                    language="c++",
                    extra_compile_args=["-O3", "-std=c++11"],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
