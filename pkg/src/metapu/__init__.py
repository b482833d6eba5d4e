"""Arbitrary-scale point cloud upsampling with a scale-conditioned residual graph network."""
__version__ = "0.1.0"
