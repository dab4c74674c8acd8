"""Cogradient descent for bilinear optimisation problems.

Modules
-------
core      dense containers, circular convolution, seeded random streams
optim     SGD/Momentum/Adam and the coordination rule
bilinear  least-squares bilinear model and the Beale toy problem
csc       convolutional sparse coding with ADMM
prune     soft-mask channel pruning of one convolution layer
imaging   PSNR/SSIM, PGM I/O, normalisation, subsampling masks
cli       experiment driver
"""

from .core import ImageGrid, NonFiniteError, ShapeError, make_rng
from .optim import (CoGDConfig, OptimizerConfig, OptTrace, baseline_step,
                    cogd_update, detect_asynchrony, difference_ratios)

__all__ = ["CoGDConfig", "ImageGrid", "NonFiniteError", "OptTrace", "OptimizerConfig",
           "ShapeError", "baseline_step", "cogd_update", "detect_asynchrony",
           "difference_ratios", "make_rng"]
