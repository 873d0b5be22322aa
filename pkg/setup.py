"""Build the optional native kernels.

Metadata lives in pyproject.toml. When Cython or a C compiler is missing the
package still installs and runs on the numpy kernels.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("MVTK_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "mvtk._kernels._ckernels",
                    ["src/mvtk/_kernels/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no FMA contraction: keeps forward results bit-identical to the numpy kernels
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
