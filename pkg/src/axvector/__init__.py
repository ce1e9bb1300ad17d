"""Adaptive x-vector speaker verification toolkit.

Submodules are imported explicitly (``from axvector import model``) rather
than re-exported here, so that the command line front end can configure BLAS
threading before any numerical module is loaded.
"""

__version__ = "0.1.0"
