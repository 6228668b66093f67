"""Masked-generative-transformer image editing on toy token grids."""

__version__ = "0.1.0"
