import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # build without the compiled kernel
    cythonize = None

ext_modules = []
if cythonize is not None and os.environ.get("KENKF_NO_EXT") != "1":
    ext_modules = cythonize(
        [
            Extension(
                "kenkf._kernels",
                ["src/kenkf/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3", "-fopenmp"],
                extra_link_args=["-fopenmp"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
