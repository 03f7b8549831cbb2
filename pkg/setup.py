import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("CUEPFLOW_PURE_PYTHON") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:  # fallback kernel is used at runtime
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [Extension("cuepflow.integrate._ckernel", ["src/cuepflow/integrate/_ckernel.pyx"],
                       include_dirs=[np.get_include()],
                       define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                       extra_compile_args=["-O3"])],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
