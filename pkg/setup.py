"""Build the optional compiled kernels; the package works without them."""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("DYNFLOW_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "dynflow._kernels",
                    ["src/dynflow/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no FP traps are relied on; lets gcc vectorize the masked relu loops
                    extra_compile_args=["-O3", "-fno-trapping-math"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
