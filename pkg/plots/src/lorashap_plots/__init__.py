"""Rendering scripts for rank-allocation run artifacts.

Pure consumers of the pipeline's text formats (importance CSV, allocation
document, sweep summary CSV); run directories are never modified.
"""

__version__ = "0.1.0"
