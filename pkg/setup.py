import os

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # fall back to the pure numpy kernels
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("TINYDRIVE_NO_EXT"):
    import numpy

    ext_modules = cythonize(
        [Extension("tinydrive.kernels._ckernels", ["src/tinydrive/kernels/_ckernels.pyx"],
                   include_dirs=[numpy.get_include()], extra_compile_args=["-O3"],
                   define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")])],
        language_level=3,
    )

setup(ext_modules=ext_modules)
