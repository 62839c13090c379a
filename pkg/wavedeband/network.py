"""Wavelet state space restoration network.

The network is a U-Net over a Haar wavelet pyramid of learned features:

* a 3x3 convolution lifts the RGB image to ``base_channels`` features;
* each encoder level splits its input with ``dwt2``, refines the low band with
  a low-frequency state space block (LFSSB), merges the three detail bands with
  selective kernel feature fusion (SKFF) and restores them with the
  high-frequency enhance block (HFEB), guided by the refined low band;
* each decoder level, deepest first, refines the low band again (adding the
  encoder's low band as a skip), enhances the high band, projects it back to
  three detail corrections added to the encoder's detail bands, and applies
  ``idwt2``;
* a 3x3 convolution predicts an RGB residual added to the input.

Output projections of every attention, scan and feed-forward branch, and the
final convolution, start at zero, so a fresh network returns its input.

For the ``dwt`` and ``map`` variants the forward pass builds a mask from the
encoder and returns the fused image; see ``wavedeband.freqmask``.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple, Union

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from wavedeband._errors import DimensionError, TrainingFault
from wavedeband.banddata import pad_to_multiple
from wavedeband.freqmask import dwt_mask, fuse, map_mask, wwm_mask
from wavedeband.schema import NetConfig, Variant
from wavedeband.wavelet import WaveletLevel, dwt2, idwt2

logger = logging.getLogger(__name__)


SCAN_CHUNK = 32
# Stands in for log(0) in the running log-sums; exp of it underflows to zero.
_LOG_ZERO = -1.0e4


def _scan_chunk(drive: torch.Tensor, log_decay: torch.Tensor) -> torch.Tensor:
    """``sum_{k<=t} exp(S_t - S_k) * drive_k`` along dim 1 with ``S = log_decay``.

    Positive and negative drives are accumulated as separate log-sum-exps so no
    intermediate overflows; ``S`` is the cumulative log decay within the chunk.
    """
    magnitude = torch.where(drive == 0, torch.ones_like(drive), drive.abs()).log()
    shifted = magnitude - log_decay
    empty = torch.full_like(shifted, _LOG_ZERO)
    positive = torch.logcumsumexp(torch.where(drive > 0, shifted, empty), dim=1)
    negative = torch.logcumsumexp(torch.where(drive < 0, shifted, empty), dim=1)
    return torch.exp(log_decay + positive) - torch.exp(log_decay + negative)


def selective_scan(
    u: torch.Tensor,
    delta: torch.Tensor,
    A: torch.Tensor,
    B: torch.Tensor,
    C: torch.Tensor,
    D: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Discretized diagonal state recurrence with input-dependent parameters.

    For every channel ``d`` and step ``t``::

        h_t = exp(delta_t * A) * h_{t-1} + (exp(delta_t * A) - 1) / A * B_t * u_t
        y_t = <C_t, h_t> + D * u_t

    which is the zero-order-hold discretization of ``h' = A h + B u``.

    The recurrence is evaluated in parallel inside chunks of ``SCAN_CHUNK``
    positions and the state is carried from one chunk to the next, so the
    Python loop runs ``seq_len / SCAN_CHUNK`` times.

    Args:
        u: Input sequence ``[batch, seq_len, d_inner]``.
        delta: Positive step sizes ``[batch, seq_len, d_inner]``.
        A: Strictly negative diagonal state matrix ``[d_inner, d_state]``.
        B: Input matrix ``[batch, seq_len, d_state]``.
        C: Output matrix ``[batch, seq_len, d_state]``.
        D: Skip weight ``[d_inner]``.

    Returns:
        ``[batch, seq_len, d_inner]``; the cost is linear in ``seq_len``.
    """
    batch_size, seq_len, d_inner = u.shape
    d_state = A.shape[1]

    delta_a = delta.unsqueeze(-1) * A  # [batch, seq_len, d_inner, d_state]
    drive = torch.expm1(delta_a) / A * B.unsqueeze(2) * u.unsqueeze(-1)

    h = u.new_zeros(batch_size, 1, d_inner, d_state)
    chunks = []
    for start in range(0, seq_len, SCAN_CHUNK):
        stop = start + SCAN_CHUNK
        log_decay = delta_a[:, start:stop].cumsum(dim=1)
        states = _scan_chunk(drive[:, start:stop], log_decay)
        states = states + torch.exp(log_decay) * h
        h = states[:, -1:]
        chunks.append(states)
    hs = torch.cat(chunks, dim=1)  # [batch, seq_len, d_inner, d_state]

    y = torch.einsum("bldn,bln->bld", hs, C)
    if D is not None:
        y = y + D * u
    return y


class LayerNorm2d(nn.Module):
    """Layer normalization over the channel axis of ``(N, C, H, W)`` maps."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        x3 = rearrange(x, "b c h w -> b (h w) c")
        mu = x3.mean(-1, keepdim=True)
        sigma = x3.var(-1, keepdim=True, unbiased=False)
        x3 = (x3 - mu) / torch.sqrt(sigma + 1e-5) * self.weight + self.bias
        return rearrange(x3, "b (h w) c -> b c h w", h=h, w=w)


class VisionStateSpace(nn.Module):
    """2D selective scan: raster order and transposed raster order, averaged."""

    def __init__(self, channels: int, state_dim: int, dt_rank: int) -> None:
        super().__init__()
        self.dt_rank = dt_rank
        self.state_dim = state_dim
        self.x_proj = nn.Linear(channels, dt_rank + 2 * state_dim, bias=False)
        self.dt_proj = nn.Linear(dt_rank, channels)
        # A = -exp(A_log) starts at -(1..state_dim) on every channel.
        a_init = torch.arange(1, state_dim + 1, dtype=torch.float32)
        self.A_log = nn.Parameter(torch.log(a_init).repeat(channels, 1))
        self.D = nn.Parameter(torch.ones(channels))
        self.out_proj = nn.Linear(channels, channels)
        self._init_step_size()
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def _init_step_size(self, dt_min: float = 1e-3, dt_max: float = 1e-1) -> None:
        # Inverse softplus of a geometric spread of initial step sizes.
        channels = self.dt_proj.out_features
        dt = torch.exp(
            torch.linspace(math.log(dt_min), math.log(dt_max), channels)
        )
        with torch.no_grad():
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))

    def scan(self, seq: torch.Tensor) -> torch.Tensor:
        """Selective scan over ``[batch, length, channels]`` sequences."""
        projected = self.x_proj(seq)
        dt, B, C = torch.split(
            projected, [self.dt_rank, self.state_dim, self.state_dim], dim=-1
        )
        delta = F.softplus(self.dt_proj(dt))
        A = -torch.exp(self.A_log)
        return selective_scan(seq, delta, A, B, C, self.D)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, _, h, w = x.shape
        rows = rearrange(x, "b c h w -> b (h w) c")
        cols = rearrange(x, "b c h w -> b (w h) c")
        # Both orders share the recurrence, so run them as one batch.
        scanned = self.scan(torch.cat((rows, cols), dim=0))
        y_rows, y_cols = scanned[:n], scanned[n:]
        y = 0.5 * (
            rearrange(y_rows, "b (h w) c -> b c h w", h=h, w=w)
            + rearrange(y_cols, "b (w h) c -> b c h w", h=h, w=w)
        )
        y = self.out_proj(rearrange(y, "b c h w -> b h w c"))
        return rearrange(y, "b h w c -> b c h w")


class GatedFeedForward(nn.Module):
    """Pointwise expansion, SiLU gate, pointwise projection back."""

    def __init__(self, channels: int, hidden: int, in_channels: int = 0) -> None:
        super().__init__()
        self.project_in = nn.Conv2d(in_channels or channels, hidden * 2, 1)
        self.project_out = nn.Conv2d(hidden, channels, 1)
        nn.init.zeros_(self.project_out.weight)
        nn.init.zeros_(self.project_out.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        value, gate = self.project_in(x).chunk(2, dim=1)
        return self.project_out(value * F.silu(gate))


class FrequencyCorrectionFeedForward(GatedFeedForward):
    """Gated feed-forward conditioned on the low-frequency feature."""

    def __init__(self, channels: int, hidden: int) -> None:
        super().__init__(channels, hidden, in_channels=2 * channels)

    def forward(self, x: torch.Tensor, low: torch.Tensor) -> torch.Tensor:
        return super().forward(torch.cat((x, low), dim=1))


class LowFrequencyBlock(nn.Module):
    """LFSSB: ``G(S(LN(f)) + beta f) + gamma (S(LN(f)) + beta f)``."""

    def __init__(self, config: NetConfig) -> None:
        super().__init__()
        channels = config.base_channels
        self.norm = LayerNorm2d(channels)
        self.scan = VisionStateSpace(channels, config.state_dim, config.dt_rank)
        self.ffn = GatedFeedForward(channels, config.hidden_channels)
        self.beta = nn.Parameter(torch.ones(()))
        self.gamma = nn.Parameter(torch.ones(()))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        z = self.scan(self.norm(f)) + self.beta * f
        out = self.ffn(z) + self.gamma * z
        if not torch.isfinite(out).all():
            raise TrainingFault("Non-finite activation in the low-frequency block")
        return out


class SelectiveKernelFusion(nn.Module):
    """SKFF: softmax-weighted merge of the three detail bands."""

    branches = 3

    def __init__(self, channels: int, reduction: int = 8) -> None:
        super().__init__()
        squeezed = max(channels // reduction, 4)
        self.avg_pool = nn.AdaptiveAvgPool2d(1)
        self.conv_du = nn.Sequential(
            nn.Conv2d(channels, squeezed, 1, bias=False), nn.PReLU()
        )
        self.fcs = nn.ModuleList(
            nn.Conv2d(squeezed, channels, 1, bias=False) for _ in range(self.branches)
        )

    def branch_weights(
        self, h: torch.Tensor, v: torch.Tensor, d: torch.Tensor
    ) -> torch.Tensor:
        """Per-channel attention over branches, ``(N, 3, C, 1, 1)``."""
        summary = self.conv_du(self.avg_pool(h + v + d))
        logits = torch.stack([fc(summary) for fc in self.fcs], dim=1)
        return logits.softmax(dim=1)

    def forward(
        self, h: torch.Tensor, v: torch.Tensor, d: torch.Tensor
    ) -> torch.Tensor:
        if not (h.shape == v.shape == d.shape):
            raise DimensionError(
                f"SKFF branches differ in shape: {tuple(h.shape)}, "
                f"{tuple(v.shape)}, {tuple(d.shape)}"
            )
        weights = self.branch_weights(h, v, d)
        return (torch.stack((h, v, d), dim=1) * weights).sum(dim=1)


class FrequencyMatchingAttention(nn.Module):
    """Channel-transposed cross attention.

    Queries come from the high-frequency stream, keys and values from the
    low-frequency stream; attention maps are ``C/heads x C/heads`` per head.
    """

    def __init__(self, channels: int, heads: int) -> None:
        super().__init__()
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.to_q = nn.Conv2d(channels, channels, 1)
        self.to_kv = nn.Conv2d(channels, channels * 2, 1)
        self.project_out = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.project_out.weight)
        nn.init.zeros_(self.project_out.bias)

    def forward(self, high: torch.Tensor, low: torch.Tensor) -> torch.Tensor:
        _, _, h, w = high.shape
        q = self.to_q(high)
        k, v = self.to_kv(low).chunk(2, dim=1)

        q = rearrange(q, "b (head c) h w -> b head c (h w)", head=self.heads)
        k = rearrange(k, "b (head c) h w -> b head c (h w)", head=self.heads)
        v = rearrange(v, "b (head c) h w -> b head c (h w)", head=self.heads)

        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)

        attn = (q @ k.transpose(-2, -1)) * self.temperature
        out = attn.softmax(dim=-1) @ v

        out = rearrange(out, "b head c (h w) -> b (head c) h w", h=h, w=w)
        return self.project_out(out)


class HighFrequencyBlock(nn.Module):
    """HFEB: attention then correction, each with a residual."""

    def __init__(self, config: NetConfig) -> None:
        super().__init__()
        channels = config.base_channels
        self.norm1 = LayerNorm2d(channels)
        self.attn = FrequencyMatchingAttention(channels, config.attention_heads)
        self.norm2 = LayerNorm2d(channels)
        self.correction = FrequencyCorrectionFeedForward(
            channels, config.hidden_channels
        )

    def forward(self, high: torch.Tensor, low: torch.Tensor) -> torch.Tensor:
        if high.shape != low.shape:
            raise DimensionError(
                f"HFEB needs matching high/low features, got {tuple(high.shape)} "
                f"and {tuple(low.shape)}"
            )
        matched = self.attn(self.norm1(high), low) + high
        return self.correction(self.norm2(matched), low) + matched


class EncoderLevel(nn.Module):
    def __init__(self, config: NetConfig) -> None:
        super().__init__()
        self.low = LowFrequencyBlock(config)
        self.fusion = SelectiveKernelFusion(config.base_channels)
        self.high = HighFrequencyBlock(config)

    def forward(
        self, x: torch.Tensor, index: int
    ) -> Tuple[WaveletLevel, torch.Tensor, torch.Tensor]:
        level = dwt2(x, level_index=index)
        low = self.low(level.ll)
        enhanced = self.high(self.fusion(*level.details), low)
        return level, low, enhanced


class DecoderLevel(nn.Module):
    def __init__(self, config: NetConfig) -> None:
        super().__init__()
        channels = config.base_channels
        self.low = LowFrequencyBlock(config)
        self.high = HighFrequencyBlock(config)
        self.to_details = nn.Conv2d(channels, channels * 3, 1)
        nn.init.zeros_(self.to_details.weight)
        nn.init.zeros_(self.to_details.bias)

    def forward(
        self, low: torch.Tensor, enhanced: torch.Tensor, level: WaveletLevel
    ) -> torch.Tensor:
        low = self.low(low)
        high = self.high(enhanced, low)
        corrections = self.to_details(high).chunk(3, dim=1)
        lh, hl, hh = (band + fix for band, fix in zip(level.details, corrections))
        return idwt2(replace(level, ll=low, lh=lh, hl=hl, hh=hh))


@dataclass
class EncoderFeatures:
    """What the encoder hands to the decoder and to the masks."""

    levels: List[WaveletLevel]
    lows: List[torch.Tensor]
    enhanced: List[torch.Tensor]


@dataclass
class RestorationOutput:
    restored: torch.Tensor
    """Final image: the fused image for dwt/map, the network output otherwise."""
    raw: torch.Tensor
    """Network output before any mask fusion."""
    mask: Optional[torch.Tensor] = None


class WaveMamba(nn.Module):
    """The restoration network. ``config.variant`` selects the forward mode."""

    def __init__(self, config: Optional[NetConfig] = None) -> None:
        super().__init__()
        self.config = config or NetConfig()
        channels = self.config.base_channels
        self.shallow = nn.Conv2d(3, channels, 3, padding=1)
        self.encoder = nn.ModuleList(
            EncoderLevel(self.config) for _ in range(self.config.depth)
        )
        self.decoder = nn.ModuleList(
            DecoderLevel(self.config) for _ in range(self.config.depth)
        )
        self.head = nn.Conv2d(channels, 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        logger.debug(
            "Built WaveMamba with %d parameters: %s",
            self.parameter_count,
            self.config.model_dump(mode="json"),
        )

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def check_input(self, img: torch.Tensor) -> None:
        if img.dim() != 4 or img.shape[1] != 3:
            raise DimensionError(
                f"Expected an (N, 3, H, W) image batch, got {tuple(img.shape)}"
            )
        multiple = self.config.multiple
        height, width = img.shape[-2:]
        if height % multiple or width % multiple:
            raise DimensionError(
                f"Image sides must be divisible by {multiple} for depth "
                f"{self.config.depth}, got {height}x{width}; pad the input first"
            )

    def shallow_extract(self, img: torch.Tensor) -> torch.Tensor:
        """3x3 convolution lifting RGB to ``base_channels`` features."""
        return self.shallow(img)

    def encode(self, features: torch.Tensor) -> EncoderFeatures:
        encoded = EncoderFeatures(levels=[], lows=[], enhanced=[])
        current = features
        for index, stage in enumerate(self.encoder, start=1):
            level, low, enhanced = stage(current, index)
            encoded.levels.append(level)
            encoded.lows.append(low)
            encoded.enhanced.append(enhanced)
            current = low
        return encoded

    def decode(self, encoded: EncoderFeatures) -> torch.Tensor:
        current = encoded.lows[-1]
        for index in reversed(range(self.config.depth)):
            low = current
            if index < self.config.depth - 1:
                low = current + encoded.lows[index]
            current = self.decoder[index](
                low, encoded.enhanced[index], encoded.levels[index]
            )
        return current

    def forward(
        self,
        img: torch.Tensor,
        *,
        variant: Optional[Union[Variant, str]] = None,
        mask_override: Optional[torch.Tensor] = None,
    ) -> RestorationOutput:
        """Restore an ``(N, 3, H, W)`` batch with values in [0, 1].

        Args:
            img: Banded input, sides divisible by ``2 ** depth``.
            variant: Overrides ``config.variant`` for this call.
            mask_override: For dwt/map, fuse with this mask instead of the one
                the encoder produces.
        """
        variant = Variant(variant or self.config.variant)
        self.check_input(img)
        encoded = self.encode(self.shallow_extract(img))
        raw = img + self.head(self.decode(encoded))
        if not torch.isfinite(raw).all():
            raise TrainingFault("Network produced non-finite output")

        if not variant.is_fused_in_forward:
            return RestorationOutput(restored=raw, raw=raw)

        size = tuple(img.shape[-2:])
        if mask_override is not None:
            mask = mask_override
        elif variant is Variant.DWT:
            mask = dwt_mask(encoded.levels, size)
        else:
            mask = map_mask(encoded.enhanced, size)
        return RestorationOutput(restored=fuse(img, raw, mask), raw=raw, mask=mask)


@torch.no_grad()
def restore(
    model: WaveMamba,
    banded: torch.Tensor,
    variant: Optional[Union[Variant, str]] = None,
) -> RestorationOutput:
    """Inference on images of any size.

    Pads a ``(3, H, W)`` or ``(N, 3, H, W)`` input by symmetric reflection to a
    multiple of ``2 ** depth``, runs the network and crops every output back.
    The wwm variant fuses the plain output with the input's own wavelet mask.
    Restored values are clamped to [0, 1].
    """
    variant = Variant(variant or model.config.variant)
    single = banded.dim() == 3
    batch = banded.unsqueeze(0) if single else banded
    padded = pad_to_multiple(batch, model.config.multiple)
    output = model(padded.padded, variant=variant)
    mask = output.mask
    restored = output.restored.clamp(0.0, 1.0)
    if variant is Variant.WWM:
        mask = wwm_mask(padded.padded, model.config.depth)
        restored = fuse(padded.padded, output.raw, mask)

    def finish(x: torch.Tensor) -> torch.Tensor:
        x = padded.crop(x)
        return x.squeeze(0) if single else x

    return RestorationOutput(
        restored=finish(restored),
        raw=finish(output.raw),
        mask=None if mask is None else finish(mask),
    )


def expected_parameter_count(config: NetConfig) -> int:
    """Closed-form parameter count of ``WaveMamba(config)``.

    With C channels, hidden width E = int(C * ffn_expansion), state size N,
    step rank R, h heads, SKFF squeeze s = max(C // 8, 4) and depth L::

        norm    = 2C
        scan    = C(R + 2N) + (RC + C) + CN + C + (C^2 + C)
        ffn     = (2EC + 2E) + (EC + C)
        lfssb   = norm + scan + ffn + 2
        skff    = Cs + 1 + 3sC
        attn    = h + (C^2 + C) + (2C^2 + 2C) + (C^2 + C)
        corr    = (4EC + 2E) + (EC + C)
        hfeb    = 2 norm + attn + corr
        encoder = lfssb + skff + hfeb
        decoder = lfssb + hfeb + (3C^2 + 3C)
        total   = (27C + C) + (27C + 3) + L (encoder + decoder)
    """
    c = config.base_channels
    e = config.hidden_channels
    n = config.state_dim
    r = config.dt_rank
    s = max(c // 8, 4)
    norm = 2 * c
    scan = c * (r + 2 * n) + (r * c + c) + c * n + c + (c * c + c)
    ffn = (2 * e * c + 2 * e) + (e * c + c)
    lfssb = norm + scan + ffn + 2
    skff = c * s + 1 + 3 * s * c
    attn = config.attention_heads + (c * c + c) + (2 * c * c + 2 * c) + (c * c + c)
    corr = (4 * e * c + 2 * e) + (e * c + c)
    hfeb = 2 * norm + attn + corr
    encoder = lfssb + skff + hfeb
    decoder = lfssb + hfeb + (3 * c * c + 3 * c)
    return (27 * c + c) + (27 * c + 3) + config.depth * (encoder + decoder)
