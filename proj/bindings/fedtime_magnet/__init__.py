"""Time-MAGNET multimodal HAR: C++ core with a thin python surface."""

from ._core import (
    MagnetError,
    Rng,
    __version__,
    evaluate,
    gelu,
    gradcheck,
    matmul,
    relative_position_bucket,
    relu,
    resolve_config,
    sigmoid,
    silu,
    sinusoidal_encoding,
    softmax,
    synth,
    train,
    weighted_cross_entropy,
)

__all__ = [
    "MagnetError",
    "Rng",
    "__version__",
    "evaluate",
    "gelu",
    "gradcheck",
    "matmul",
    "relative_position_bucket",
    "relu",
    "resolve_config",
    "sigmoid",
    "silu",
    "sinusoidal_encoding",
    "softmax",
    "synth",
    "train",
    "weighted_cross_entropy",
]
