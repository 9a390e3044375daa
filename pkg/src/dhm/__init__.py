"""Desk-scale snapshot spectral compressive imaging toolkit.

Subpackages: ``autodiff`` (tensor engine), ``cassi`` (sensing operator and
file formats), ``ssm`` (selective-scan kernel), ``network`` (state-space
denoiser), ``unfolding`` (iterative reconstruction and training),
``metrics`` (PSNR/SSIM and synthetic data), ``cli`` (command-line entry).
"""

__version__ = "0.1.0"

from .autodiff import Tensor, Adam  # noqa: F401
