import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("MASENSE_NO_EXT", "") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:  # build the pure-Python package only
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "masense._crbkernel",
                    ["src/masense/_crbkernel.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3", "-fcx-limited-range"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
