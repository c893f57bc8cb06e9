"""Visibility-aware radiance fields for extrapolating views from a few posed images.

Modules
-------
geometry    cameras, rays, frustum tests, contraction, virtual trajectories
field       ground-truth voxel field and learnable hash-grid field
render      stratified sampling, compositing and its gradient
visibility  k-th largest transmittance visibility maps, pseudo-disocclusion masks
losses      photometric, depth, inpainting, distortion and hash-decay objectives
plugins     inpainting / enhancement / depth-completion providers
pipeline    the three training stages
metrics     PSNR, SSIM and visibility-bucketed reports
io, scenes  file formats and synthetic scenes
"""

from .errors import ConfigError, DomainError, NumericError, ProviderError, UsageError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DomainError", "NumericError", "ProviderError", "UsageError", "__version__"]
