"""Build script for the optional compiled histogram kernel.

The package works without the extension (a numpy fallback is selected at
import time), so a failed compile degrades to the pure path instead of
breaking the install.
"""

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext = Extension(
        "darkforge._fasthist",
        sources=["src/darkforge/_fasthist.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    ext.optional = True
    ext_modules = cythonize([ext], language_level=3)

setup(ext_modules=ext_modules)
