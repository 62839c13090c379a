"""Orthonormal 2D Haar transform and its multi-level pyramid.

Feature maps are channel-first tensors ``(..., C, H, W)``. One analysis step
splits every 2x2 block ``[[a, b], [c, d]]`` into::

    ll = (a + b + c + d) / 2
    lh = (a - b + c - d) / 2    high along each row: horizontal detail
    hl = (a + b - c - d) / 2    high along each column: vertical detail
    hh = (a - b - c + d) / 2    diagonal detail

which is the separable filter pair low = [1, 1] / sqrt(2), high = [1, -1] /
sqrt(2) applied along rows then columns. The transform is its own inverse up
to the block rearrangement, so synthesis is exact.

The transform never pads; callers make sides divisible first (see
``banddata.pad_to_multiple``).
"""

from dataclasses import dataclass, replace
from typing import Tuple

import torch
from einops import rearrange

from wavedeband._errors import ArgumentError, DimensionError


def check_feature_map(x: torch.Tensor, name: str = "x") -> None:
    """Validate a feature map: at least 3 dims, non-empty, finite values."""
    if x.dim() < 3:
        raise DimensionError(
            f"Expected {name} with shape (..., C, H, W), got {tuple(x.shape)}"
        )
    if min(x.shape[-3:]) < 1:
        raise DimensionError(f"{name} has an empty axis: {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ArgumentError(f"{name} contains NaN or Inf values")


@dataclass(frozen=True)
class WaveletLevel:
    """The four subbands produced by one analysis step."""

    ll: torch.Tensor
    lh: torch.Tensor
    hl: torch.Tensor
    hh: torch.Tensor
    level_index: int = 1

    @property
    def details(self) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(horizontal, vertical, diagonal) detail bands."""
        return self.lh, self.hl, self.hh

    def energy(self) -> torch.Tensor:
        """Sum of squares over all four bands."""
        return sum(band.pow(2).sum() for band in (self.ll, *self.details))


@dataclass(frozen=True)
class WaveletPyramid:
    levels: Tuple[WaveletLevel, ...]

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def coarsest(self) -> WaveletLevel:
        return self.levels[-1]


def dwt2(x: torch.Tensor, level_index: int = 1) -> WaveletLevel:
    """One level of the orthonormal 2D Haar analysis, applied per channel."""
    height, width = x.shape[-2:]
    if height % 2 or width % 2:
        raise DimensionError(
            f"dwt2 needs even height and width, got {height}x{width}; "
            f"pad the input first"
        )
    a, b, c, d = rearrange(x, "... (h r) (w s) -> (r s) ... h w", r=2, s=2)
    return WaveletLevel(
        ll=(a + b + c + d) * 0.5,
        lh=(a - b + c - d) * 0.5,
        hl=(a + b - c - d) * 0.5,
        hh=(a - b - c + d) * 0.5,
        level_index=level_index,
    )


def idwt2(level: WaveletLevel) -> torch.Tensor:
    """Exact synthesis inverse of ``dwt2``."""
    shape = level.ll.shape
    for name, band in zip(("lh", "hl", "hh"), level.details):
        if band.shape != shape:
            raise DimensionError(
                f"Subband {name} has shape {tuple(band.shape)}, expected "
                f"{tuple(shape)} to match ll"
            )
    ll, lh, hl, hh = level.ll, level.lh, level.hl, level.hh
    blocks = torch.stack(
        (
            (ll + lh + hl + hh) * 0.5,
            (ll - lh + hl - hh) * 0.5,
            (ll + lh - hl - hh) * 0.5,
            (ll - lh - hl + hh) * 0.5,
        )
    )
    return rearrange(blocks, "(r s) ... h w -> ... (h r) (w s)", r=2, s=2)


def decompose(x: torch.Tensor, depth: int = 3) -> WaveletPyramid:
    """Recursive ``dwt2`` on the low band, ``depth`` times."""
    if depth < 1:
        raise ArgumentError(f"depth must be at least 1, got {depth}")
    height, width = x.shape[-2:]
    multiple = 2**depth
    if height % multiple or width % multiple:
        raise DimensionError(
            f"A {depth}-level decomposition needs sides divisible by {multiple}, "
            f"got {height}x{width}"
        )
    levels = []
    current = x
    for index in range(1, depth + 1):
        level = dwt2(current, level_index=index)
        levels.append(level)
        current = level.ll
    return WaveletPyramid(levels=tuple(levels))


def reconstruct(pyramid: WaveletPyramid) -> torch.Tensor:
    """Invert ``decompose``, deepest level first.

    Only the coarsest ``ll`` band is read; the intermediate ``ll`` bands are
    regenerated by synthesis, so edits to detail bands propagate upward.
    """
    if not pyramid.levels:
        raise ArgumentError("Cannot reconstruct an empty pyramid")
    current = pyramid.coarsest.ll
    for level in reversed(pyramid.levels):
        current = idwt2(replace(level, ll=current))
    return current
