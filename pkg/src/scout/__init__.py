"""Semi-supervised camouflaged object segmentation with adaptive sample selection and text fusion.

Submodules are imported lazily by the command-line entry point so that
thread settings can be applied before numpy starts.
"""

__version__ = "0.1.0"
