# 6C 72 65 69 64 70 79

__title__ = "lreidpy"
__description__ = "Lifelong person re-identification with adaptive knowledge accumulation."
__url__ = "https://github.com/lreidpy/lreidpy"
__version__ = "0.1.0"
__author__ = "lreidpy contributors"
__author_email__ = "lreidpy@users.noreply.github.com"
__license__ = "MIT license"
__copyright__ = "Copyright 2026 lreidpy contributors"
