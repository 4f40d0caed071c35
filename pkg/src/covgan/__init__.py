"""covgan: conditional-GAN prediction of virtual channel covariance matrices
from multi-basestation omni pilot signatures, on a deterministic synthetic
street-canyon scene.

Submodules: scene (geometry + image-source rays), channel (wideband channel,
covariance, DFT virtual domain), pilot (omni reception, signatures), dataset
(grid sweep + CCV1 files), gan (model + training; imports torch), evaluation
(NMSE, baselines, sweeps, image export), cli (command-line entry point).
"""

__version__ = "0.1.0"
