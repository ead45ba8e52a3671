"""Build the optional compiled backward-pass kernel.

The package works without it: ``covsddp.sddp.kernels`` falls back to the
pure-Python recursion when the extension is missing.
"""

import os

import numpy as np
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

try:
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover
    cythonize = None


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # pragma: no cover
            print(f"WARNING: compiled kernel not built ({exc}); using pure-Python fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # pragma: no cover
            print(f"WARNING: failed to build {ext.name} ({exc}); using pure-Python fallback")


ext_modules = []
if cythonize is not None and not os.environ.get("COVSDDP_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "covsddp.sddp._backward_ext",
                ["src/covsddp/sddp/_backward_ext.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules, cmdclass={"build_ext": OptionalBuildExt})
