"""Weighted wavelet maps and mask-guided fusion.

A mask is a ``(N, 1, H, W)`` tensor in [0, 1] measuring high-frequency
activity. Fusion keeps the banded input where the mask is high (edges,
texture) and the restored image where it is low (flat, banding-prone areas):

    fused = mask * banded + (1 - mask) * restored

Three ways of building the mask are provided:

* ``wwm_mask``: from the input image itself, using only the coarsest level of
  a grayscale wavelet decomposition. Applied after prediction.
* ``dwt_mask``: from the network's encoder detail bands at every level.
* ``map_mask``: from the enhanced high-frequency features at every level.
"""

from typing import Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from wavedeband._errors import ArgumentError, DimensionError
from wavedeband.wavelet import WaveletLevel, decompose

# BT.601 luma weights.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

Size = Tuple[int, int]


def to_grayscale(img: torch.Tensor) -> torch.Tensor:
    """BT.601 luma of an ``(N, 3, H, W)`` image, shape ``(N, 1, H, W)``."""
    if img.dim() < 3 or img.shape[-3] != 3:
        raise ArgumentError(
            f"to_grayscale expects 3 channels, got shape {tuple(img.shape)}"
        )
    weights = img.new_tensor(LUMA_WEIGHTS).view(3, 1, 1)
    return (img * weights).sum(dim=-3, keepdim=True)


def minmax_normalize(s: torch.Tensor) -> torch.Tensor:
    """Map each sample's spatial minimum to 0 and maximum to 1.

    A sample whose values are all equal maps to zeros: no high-frequency
    content anywhere means the restored image is trusted everywhere.
    """
    if not torch.isfinite(s).all():
        raise ArgumentError("minmax_normalize got NaN or Inf values")
    low = s.amin(dim=(-2, -1), keepdim=True)
    high = s.amax(dim=(-2, -1), keepdim=True)
    span = high - low
    flat = span <= 0
    safe_span = torch.where(flat, torch.ones_like(span), span)
    return torch.where(flat, torch.zeros_like(s), (s - low) / safe_span)


def upsample(s: torch.Tensor, size: Size) -> torch.Tensor:
    """Bilinear resize of an ``(N, 1, h, w)`` map without corner alignment."""
    if tuple(s.shape[-2:]) == tuple(size):
        return s
    return F.interpolate(s, size=size, mode="bilinear", align_corners=False)


def wwm_mask(img: torch.Tensor, depth: int = 3) -> torch.Tensor:
    """Mask from the coarsest wavelet level of the input image.

    Args:
        img: ``(N, 3, H, W)`` RGB or ``(N, 1, H, W)`` gray image, sides
            divisible by ``2 ** depth``.
        depth: Decomposition depth; only its last level is used.

    Returns:
        ``(N, 1, H, W)`` mask in [0, 1].
    """
    gray = img if img.shape[-3] == 1 else to_grayscale(img)
    coarsest = decompose(gray, depth).coarsest
    magnitude = coarsest.lh.abs() + coarsest.hl.abs() + coarsest.hh.abs()
    return minmax_normalize(upsample(magnitude, tuple(img.shape[-2:])))


def fuse(
    banded: torch.Tensor, restored: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Convex per-pixel blend of the banded input and the restored output.

    Computed as an interpolation from ``restored`` towards ``banded`` so that a
    mask of exactly 1 returns ``banded``, a mask of exactly 0 returns
    ``restored``, and ``fuse(x, x, m)`` returns ``x``, all bit for bit.
    """
    if banded.shape != restored.shape:
        raise DimensionError(
            f"banded {tuple(banded.shape)} and restored {tuple(restored.shape)} "
            f"differ in shape"
        )
    if mask.shape[-2:] != banded.shape[-2:] or mask.shape[-3] != 1:
        raise DimensionError(
            f"mask {tuple(mask.shape)} does not match image {tuple(banded.shape)}"
        )
    weight = mask.expand_as(banded)
    return torch.lerp(restored, banded, weight).clamp(0.0, 1.0)


def _detail_magnitude(bands: Sequence[torch.Tensor]) -> torch.Tensor:
    # Channel mean is taken after the absolute sum.
    total = sum(band.abs() for band in bands)
    return total.mean(dim=-3, keepdim=True)


def _average_levels(maps: Sequence[torch.Tensor], size: Size) -> torch.Tensor:
    upsampled = [upsample(m, size) for m in maps]
    return minmax_normalize(torch.stack(upsampled).mean(dim=0))


def dwt_mask(
    levels: Sequence[WaveletLevel], size: Optional[Size] = None
) -> torch.Tensor:
    """Mask from the encoder's detail bands averaged over all levels.

    Args:
        levels: Feature-space wavelet levels, finest first.
        size: Output resolution; defaults to twice the first level's size.
    """
    if not levels:
        raise ArgumentError("dwt_mask needs at least one wavelet level")
    if size is None:
        height, width = levels[0].ll.shape[-2:]
        size = (2 * height, 2 * width)
    maps = [_detail_magnitude(level.details) for level in levels]
    return _average_levels(maps, size)


def map_mask(
    enhanced: Sequence[torch.Tensor], size: Optional[Size] = None
) -> torch.Tensor:
    """Mask from the enhanced high-frequency features of every level.

    Args:
        enhanced: One ``(N, C, h_i, w_i)`` feature per level, finest first.
        size: Output resolution; defaults to twice the first feature's size.
    """
    if not enhanced:
        raise ArgumentError("map_mask needs at least one enhanced feature map")
    if size is None:
        height, width = enhanced[0].shape[-2:]
        size = (2 * height, 2 * width)
    maps = [_detail_magnitude((feature,)) for feature in enhanced]
    return _average_levels(maps, size)
