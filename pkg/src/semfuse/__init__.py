"""Depth-only semantic mapping: synthetic rendering, TSDF reconstruction,
stacked-autoencoder segmentation and Bayesian label fusion."""

__version__ = "0.1.0"
