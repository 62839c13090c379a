from dataclasses import replace

import pytest
import torch

from tests.unit_tests.utils.oracles import haar_level_loops
from wavedeband import (
    ArgumentError,
    DimensionError,
    WaveletPyramid,
    decompose,
    dwt2,
    idwt2,
    reconstruct,
)
from wavedeband.wavelet import WaveletLevel


def _block(rows: list) -> torch.Tensor:
    return torch.tensor(rows, dtype=torch.float64).unsqueeze(0)


@pytest.mark.parametrize(
    "block,expected",
    [
        ([[1.0, 1.0], [1.0, 1.0]], (2.0, 0.0, 0.0, 0.0)),
        ([[1.0, 0.0], [1.0, 0.0]], (1.0, 1.0, 0.0, 0.0)),
        ([[1.0, 1.0], [0.0, 0.0]], (1.0, 0.0, 1.0, 0.0)),
        ([[1.0, 0.0], [0.0, 1.0]], (1.0, 0.0, 0.0, 1.0)),
    ],
)
def test_dwt2_hand_computed_blocks(block: list, expected: tuple) -> None:
    level = dwt2(_block(block))
    got = tuple(float(band) for band in (level.ll, level.lh, level.hl, level.hh))
    assert got == expected


def test_idwt2_hand_computed_blocks() -> None:
    zero = torch.zeros(1, 1, 1, dtype=torch.float64)
    one = torch.ones(1, 1, 1, dtype=torch.float64)
    constant = idwt2(WaveletLevel(ll=2 * one, lh=zero, hl=zero, hh=zero))
    assert torch.equal(constant, _block([[1.0, 1.0], [1.0, 1.0]]))
    stripes = idwt2(WaveletLevel(ll=one, lh=one, hl=zero, hh=zero))
    assert torch.equal(stripes, _block([[1.0, 0.0], [1.0, 0.0]]))


def test_dwt2_shapes() -> None:
    level = dwt2(torch.rand(4, 8, 8))
    for band in (level.ll, *level.details):
        assert band.shape == (4, 4, 4)
    assert dwt2(torch.rand(2, 3, 8, 6)).ll.shape == (2, 3, 4, 3)


def test_dwt2_rejects_odd_sides() -> None:
    with pytest.raises(DimensionError):
        dwt2(torch.rand(1, 7, 8))
    with pytest.raises(DimensionError):
        dwt2(torch.rand(1, 8, 5))


def test_idwt2_rejects_mismatched_bands() -> None:
    level = dwt2(torch.rand(1, 8, 8))
    with pytest.raises(DimensionError):
        idwt2(replace(level, hh=torch.zeros(1, 2, 4)))


def test_dwt2_matches_loop_oracle() -> None:
    generator = torch.Generator().manual_seed(0)
    for _ in range(100):
        x = torch.rand(2, 8, 8, generator=generator, dtype=torch.float64)
        level = dwt2(x)
        for fast, slow in zip(
            (level.ll, level.lh, level.hl, level.hh), haar_level_loops(x)
        ):
            assert torch.allclose(fast, slow, rtol=0, atol=1e-10)


def test_perfect_reconstruction_and_energy() -> None:
    generator = torch.Generator().manual_seed(1)
    for _ in range(100):
        x = torch.randn(3, 16, 16, generator=generator, dtype=torch.float64)
        level = dwt2(x)
        assert (idwt2(level) - x).abs().max() < 1e-6
        energy = x.double().pow(2).sum()
        assert abs(float(level.energy()) - float(energy)) / float(energy) < 1e-6
        pyramid = decompose(x, 3)
        assert (reconstruct(pyramid) - x).abs().max() < 1e-5


def test_constant_input_has_no_detail() -> None:
    pyramid = decompose(torch.full((3, 64, 64), 0.37, dtype=torch.float64), 3)
    for level in pyramid.levels:
        for band in level.details:
            assert band.abs().max() <= 1e-12


def test_linearity() -> None:
    generator = torch.Generator().manual_seed(2)
    x = torch.randn(2, 8, 8, generator=generator, dtype=torch.float64)
    y = torch.randn(2, 8, 8, generator=generator, dtype=torch.float64)
    combined = dwt2(0.3 * x - 1.7 * y)
    lx, ly = dwt2(x), dwt2(y)
    for band in ("ll", "lh", "hl", "hh"):
        expected = 0.3 * getattr(lx, band) - 1.7 * getattr(ly, band)
        assert torch.allclose(getattr(combined, band), expected, rtol=0, atol=1e-10)


def test_decompose_shapes_and_recursion() -> None:
    pyramid = decompose(torch.rand(5, 64, 64), 3)
    assert pyramid.depth == 3
    assert [level.ll.shape[-1] for level in pyramid.levels] == [32, 16, 8]
    assert [level.level_index for level in pyramid.levels] == [1, 2, 3]

    x = torch.rand(1, 16, 16, dtype=torch.float64)
    manual = dwt2(dwt2(x).ll)
    second = decompose(x, 2).levels[1]
    for band in ("ll", "lh", "hl", "hh"):
        assert torch.equal(getattr(second, band), getattr(manual, band))


@pytest.mark.parametrize("size,depth", [((64, 60), 3), ((12, 12), 3), ((6, 8), 2)])
def test_decompose_rejects_indivisible_sides(size: tuple, depth: int) -> None:
    with pytest.raises(DimensionError):
        decompose(torch.rand(1, *size), depth)


def test_decompose_rejects_zero_depth() -> None:
    with pytest.raises(ArgumentError):
        decompose(torch.rand(1, 8, 8), 0)


def test_reconstruct_rejects_empty_pyramid() -> None:
    with pytest.raises(ArgumentError):
        reconstruct(WaveletPyramid(levels=()))


def test_constant_image_reconstructs_without_details() -> None:
    x = torch.full((1, 32, 32), 0.5, dtype=torch.float64)
    pyramid = decompose(x, 3)
    zeroed = WaveletPyramid(
        levels=tuple(
            replace(level, lh=level.lh * 0, hl=level.hl * 0, hh=level.hh * 0)
            for level in pyramid.levels
        )
    )
    assert torch.allclose(reconstruct(zeroed), x, rtol=0, atol=1e-12)


def test_dropping_details_loses_exactly_their_energy() -> None:
    ramp = torch.linspace(0, 1, 64, dtype=torch.float64)
    x = (ramp.view(1, 1, 64) + 0.5 * ramp.view(1, 64, 1) ** 2).repeat(2, 1, 1)
    pyramid = decompose(x, 3)
    detail_energy = sum(
        float(band.pow(2).sum()) for level in pyramid.levels for band in level.details
    )
    zeroed = WaveletPyramid(
        levels=tuple(
            replace(level, lh=level.lh * 0, hl=level.hl * 0, hh=level.hh * 0)
            for level in pyramid.levels
        )
    )
    residual = float((x - reconstruct(zeroed)).pow(2).sum())
    assert residual == pytest.approx(detail_energy, rel=1e-9)
