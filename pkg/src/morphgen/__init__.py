"""Two-stage generative modelling of 3D two-channel cell volumes.

Stage 1 is a vector-quantised autoencoder with per-channel codebooks; stage 2
is a latent diffusion model per perturbation.  The package also ships the
evaluation metrics, shape descriptors and a synthetic cell generator.
"""
__version__ = "0.1.0"
