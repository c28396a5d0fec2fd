"""Build script: compiles the optional fast-geometry extension.

The package is fully functional without the extension (a numpy fallback is
selected at import time); build failures therefore only emit a warning.
Build with `pip install -e .` or `python setup.py build_ext --inplace`.
"""

import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Degrade to the pure backend instead of failing the install."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            print(f"WARNING: fast-geometry extension not built ({exc}); "
                  "falling back to the pure numpy backend", file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            print(f"WARNING: failed to compile {ext.name} ({exc}); "
                  "falling back to the pure numpy backend", file=sys.stderr)


def extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    return cythonize(
        ["src/cqdet/_fastgeom.pyx"],
        compiler_directives={"language_level": "3"},
    )


setup(
    ext_modules=extensions(),
    cmdclass={"build_ext": OptionalBuildExt},
)
