import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("PANOWORLD_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "panoworld._kernels",
                    ["src/panoworld/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no fast-math: results must match the numpy fallback bit for bit
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
