"""Spectral super-resolution: reconstruct 31-band hyperspectral images from RGB."""

from .data import HyperCube, RgbImage
from .network import Network, NetworkConfig, build_network, init_he_normal
from .training import TrainConfig, train

__all__ = [
    "HyperCube",
    "Network",
    "NetworkConfig",
    "RgbImage",
    "TrainConfig",
    "build_network",
    "init_he_normal",
    "train",
]
