"""Build script for the optional compiled simulation kernel.

The package works without it: ``stagesched._backend`` falls back to the
pure-Python kernel when the extension is missing.
"""
import os

from setuptools import Extension, setup

extensions = []
if not os.environ.get("STAGESCHED_NO_EXT"):
    try:
        from Cython.Build import cythonize

        extensions = cythonize(
            [
                Extension(
                    "stagesched._kernel",
                    ["src/stagesched/_kernel.pyx"],
                    language="c++",
                    # keep a*b+c unfused so results match the Python kernel bit for bit
                    extra_compile_args=["-O2", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        extensions = []

setup(ext_modules=extensions)
