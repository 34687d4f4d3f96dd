"""Blind non-uniform (camera-shake) image deblurring.

Estimates a spatially-varying blur operator, modeled as a weighted sum of
in-plane camera poses, together with a sharp latent image from a single
blurry photograph, by majorization-minimization of a coupled adaptive
sparsity cost.
"""

__version__ = "0.1.0"
