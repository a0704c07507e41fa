"""Subtractive dithered lattice quantization for federated learning.

Library layout:

- ``lattice``: lattices, nearest-point quantization, basic-cell dither.
- ``entropy``: zig-zag/Elias-gamma and Rice bit streams, the 12-bit norm code.
- ``codec``: the dithered lattice encoder/decoder with rate-constrained scaling.
- ``baselines``: rate-matched QSGD, rotated-uniform and masked-uniform schemes.
- ``flsim``: federated-averaging engine with local SGD and quantized uplinks.
- ``datamodel``: models with analytic gradients, synthetic data, MNIST, partitioners.
- ``analysis``: distortion-law, aggregation-bound and convergence validators.
- ``cli``: experiment presets (`uveqfed --list`).
"""

from .codec import EncodedUpdate, UVeQFedCodec, UVeQFedConfig, decode, encode
from .lattice import Lattice, estimate_second_moment, nearest_point, sample_dither

__all__ = [
    "EncodedUpdate",
    "Lattice",
    "UVeQFedCodec",
    "UVeQFedConfig",
    "decode",
    "encode",
    "estimate_second_moment",
    "nearest_point",
    "sample_dither",
]

__version__ = "0.1.0"
