"""Hot numeric kernels, each with a numba and a pure-numpy implementation."""
from .conv import col2im, conv_output_extent, im2col
from .mcubes import marching_cubes

__all__ = ["im2col", "col2im", "conv_output_extent", "marching_cubes"]
