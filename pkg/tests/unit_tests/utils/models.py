"""Small networks for fast tests."""

from typing import Any

import torch

from wavedeband import NetConfig, WaveMamba


def small_config(**overrides: Any) -> NetConfig:
    values: dict = {
        "base_channels": 8,
        "depth": 3,
        "state_dim": 4,
        "ffn_expansion": 2.0,
        "attention_heads": 2,
    }
    values.update(overrides)
    return NetConfig(**values)


@torch.no_grad()
def perturb_parameters(
    module: torch.nn.Module, seed: int = 0, scale: float = 0.2
) -> torch.nn.Module:
    """Add seeded noise to every parameter.

    Output projections start at zero, which makes a fresh network an exact
    identity; gradient and sensitivity checks need a network that is not.
    """
    generator = torch.Generator().manual_seed(seed)
    for parameter in module.parameters():
        noise = torch.randn(parameter.shape, generator=generator, dtype=torch.float64)
        parameter.add_(scale * noise.to(parameter.dtype))
    return module


def small_model(seed: int = 0, **overrides: Any) -> WaveMamba:
    torch.manual_seed(seed)
    return WaveMamba(small_config(**overrides))
