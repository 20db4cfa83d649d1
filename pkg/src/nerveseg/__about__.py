__all__ = [
    "__title__",
    "__summary__",
    "__uri__",
    "__author__",
    "__email__",
    "__license__",
    "__copyright__",
    "__version__",
]

__title__ = "nerveseg"
__summary__ = (
    "U-Net and dilated U-Net nerve segmentation for ultrasound images, built on a "
    "small reverse-mode differentiation engine."
)
__uri__ = ""

__author__ = "The nerveseg developers"
__email__ = ""

__license__ = "BSD-3-Clause"
__copyright__ = f"Copyright 2026 {__author__}"

__version__ = "0.1.0"
