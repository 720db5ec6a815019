import os

from setuptools import setup

ext_modules = []
if not os.environ.get("DRONEASSESS_NO_EXT"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [Extension("droneassess._search", ["src/droneassess/_search.pyx"],
                       include_dirs=[numpy.get_include()],
                       define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                       extra_compile_args=["-O3", "-ffp-contract=off"])],
            language_level="3",
        )

setup(ext_modules=ext_modules)
