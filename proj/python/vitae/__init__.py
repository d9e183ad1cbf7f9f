"""Native-aspect image autoencoder with token packing, latent flow generation
and evaluation metrics.

Configuration strings use the same sectioned JSON as the command line
(``model``, ``train``, ``loss``, ``flow``, ``eval``, ``data``), so snippets
move between the two front ends unchanged.
"""

from ._vitae import (
    Autoencoder,
    Flow,
    __version__,
    compression_ratio,
    config_hash,
    fit_grid,
    psnr,
    ssim,
    synthetic_images,
)

__all__ = [
    "Autoencoder",
    "Flow",
    "__version__",
    "compression_ratio",
    "config_hash",
    "fit_grid",
    "psnr",
    "ssim",
    "synthetic_images",
]
