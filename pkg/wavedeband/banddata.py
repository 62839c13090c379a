"""Synthetic banding data, paired patch datasets and image I/O.

Banding is synthesized by re-quantizing smooth content to a low bit depth.
A dataset is a list of aligned (pristine, banded) patches with a split
assignment made at source-image granularity, so near-duplicate overlapping
patches of one image never straddle two splits.

On disk a dataset is a flat directory::

    <id>_pristine.<ext>
    <id>_banded.<ext>
    manifest.jsonl        one ManifestRecord per pair

``<ext>`` is ``npy`` (lossless float32, H x W x 3) or any 8-bit lossless image
format Pillow reads. A directory without a manifest is imported by pairing
file names, which lets externally prepared patch pairs be evaluated as is.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from wavedeband._errors import (
    ArgumentError,
    DataIOError,
    DimensionError,
    UnsupportedFormatError,
)
from wavedeband.schema import ManifestRecord, Split
from wavedeband.serialization import RecordSerializer, log_warning_once

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MANIFEST_NAME = "manifest.jsonl"
IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff", ".npy")
_EIGHT_BIT_MODES = {"1", "L", "P", "RGB", "RGBA", "LA", "CMYK", "YCbCr"}

_manifest_serializer = RecordSerializer(ManifestRecord)


@dataclass
class ImagePair:
    pristine: torch.Tensor
    banded: torch.Tensor
    id: str
    source: str = "synthetic"
    image_id: str = ""
    bits: Optional[int] = None
    top: int = 0
    left: int = 0

    def __post_init__(self) -> None:
        if self.pristine.shape != self.banded.shape:
            raise DimensionError(
                f"Pair {self.id}: pristine {tuple(self.pristine.shape)} and "
                f"banded {tuple(self.banded.shape)} differ in shape"
            )
        if not self.image_id:
            self.image_id = self.id


@dataclass
class PatchDataset:
    pairs: List[ImagePair]
    split: Dict[str, Split]
    patch_size: int
    seed: int
    _by_split: Dict[Split, List[ImagePair]] = field(
        default_factory=dict, init=False, repr=False
    )

    def subset(self, split: Union[Split, str]) -> List[ImagePair]:
        """Pairs of one split in dataset order; ``"all"`` returns every pair."""
        if split == "all":
            return list(self.pairs)
        split = Split(split)
        if split not in self._by_split:
            self._by_split[split] = [p for p in self.pairs if self.split[p.id] is split]
        return self._by_split[split]

    def counts(self) -> Dict[str, int]:
        return {s.value: len(self.subset(s)) for s in Split}

    def image_ids(self, split: Union[Split, str]) -> List[str]:
        return sorted({p.image_id for p in self.subset(split)})


def synth_band(
    pristine: torch.Tensor, bits: int, dither_seed: Optional[int] = None
) -> torch.Tensor:
    """Re-quantize ``pristine`` (values in [0, 1]) to ``bits`` per channel.

    With ``dither_seed`` set, uniform noise of one quantization step is added
    before rounding, reproducibly.
    """
    if not 2 <= bits <= 8:
        raise ArgumentError(f"bits must be between 2 and 8, got {bits}")
    levels = float(2**bits - 1)
    scaled = pristine * levels
    if dither_seed is not None:
        generator = torch.Generator().manual_seed(dither_seed)
        noise = torch.rand(pristine.shape, generator=generator, dtype=pristine.dtype)
        scaled = (scaled + noise - 0.5).clamp(0.0, levels)
    return torch.round(scaled) / levels


def gen_gradient_corpus(n: int, size: int, seed: int) -> List[torch.Tensor]:
    """``n`` pristine ``(3, size, size)`` images of smooth gradients.

    Each image is a linear or radial two-color gradient, the content where
    banding shows, with a noise texture patch on a random sub-region so that
    detail preservation is exercised too.
    """
    if size < 32 or size & (size - 1):
        raise ArgumentError(f"size must be a power of two >= 32, got {size}")
    generator = torch.Generator().manual_seed(seed)

    def uniform(*shape: int, low: float = 0.0, high: float = 1.0) -> torch.Tensor:
        return low + (high - low) * torch.rand(shape, generator=generator)

    coords = (torch.arange(size, dtype=torch.float32) + 0.5) / size
    yy, xx = torch.meshgrid(coords, coords, indexing="ij")
    corpus = []
    for _ in range(n):
        start = uniform(3, low=0.1, high=0.9)
        end = (start + uniform(3, low=-0.35, high=0.35)).clamp(0.0, 1.0)
        if torch.rand((), generator=generator) < 0.5:
            angle = uniform(1, high=2 * math.pi).item()
            t = math.cos(angle) * xx + math.sin(angle) * yy
        else:
            cy, cx = uniform(2).tolist()
            t = torch.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        t = (t - t.min()) / (t.max() - t.min())
        img = start.view(3, 1, 1) + (end - start).view(3, 1, 1) * t

        region = int(torch.randint(size // 8, size // 4 + 1, (), generator=generator))
        corner = torch.randint(0, size - region + 1, (2,), generator=generator)
        top, left = corner.tolist()
        amplitude = uniform(1, low=0.15, high=0.3)
        texture = amplitude * (uniform(1, region, region) - 0.5)
        img[:, top : top + region, left : left + region] += texture
        corpus.append(img.clamp(0.0, 1.0))
    logger.debug("Generated %d gradient images of size %d (seed %d)", n, size, seed)
    return corpus


def _axis_offsets(length: int, patch: int, stride: int) -> List[int]:
    offsets = list(range(0, length - patch + 1, stride))
    if offsets[-1] != length - patch:
        offsets.append(length - patch)
    return offsets


def patch_grid(
    height: int, width: int, patch: int, stride: int
) -> List[Tuple[int, int]]:
    """Raster-order (top, left) offsets; the last row and column touch the edge."""
    if patch > min(height, width):
        raise ArgumentError(
            f"patch={patch} does not fit in a {height}x{width} image"
        )
    if patch < 1 or stride < 1:
        raise ArgumentError(f"patch and stride must be positive, got {patch}, {stride}")
    return [
        (top, left)
        for top in _axis_offsets(height, patch, stride)
        for left in _axis_offsets(width, patch, stride)
    ]


def extract_patches(img: torch.Tensor, patch: int, stride: int) -> List[torch.Tensor]:
    """Overlapping square patches of a ``(C, H, W)`` image, raster order."""
    height, width = img.shape[-2:]
    return [
        img[..., top : top + patch, left : left + patch].clone()
        for top, left in patch_grid(height, width, patch, stride)
    ]


_SPLIT_TENTHS = (7, 2, 1)


def _split_sizes(count: int) -> Tuple[int, int, int]:
    """70/20/10 by largest remainder; ties go to the smaller split."""
    quotas = [count * tenths for tenths in _SPLIT_TENTHS]
    sizes = [quota // 10 for quota in quotas]
    leftover = count - sum(sizes)
    by_remainder = sorted(range(3), key=lambda i: (quotas[i] % 10, i), reverse=True)
    for index in by_remainder[:leftover]:
        sizes[index] += 1
    return sizes[0], sizes[1], sizes[2]


def _assign_splits(count: int, generator: torch.Generator) -> List[Split]:
    train, val, test = _split_sizes(count)
    if min(train, val, test) == 0:
        raise ArgumentError(
            f"{count} source images cannot populate a 70/20/10 split "
            f"(got {train}/{val}/{test}); provide at least 5 images"
        )
    order = torch.randperm(count, generator=generator).tolist()
    assignment = [Split.TEST] * count
    for rank, index in enumerate(order):
        if rank < train:
            assignment[index] = Split.TRAIN
        elif rank < train + val:
            assignment[index] = Split.VAL
    return assignment


def make_dataset(
    corpus: Sequence[torch.Tensor],
    bits: Union[int, Sequence[int]],
    patch: int,
    stride: int,
    seed: int,
    *,
    dither: bool = False,
) -> PatchDataset:
    """Band every corpus image, cut aligned patches and split by image.

    Args:
        corpus: Pristine ``(3, H, W)`` images.
        bits: One bit depth, or a set to draw each image's bit depth from.
        patch: Patch side.
        stride: Patch stride; the edge rows/columns are always covered.
        seed: Seeds the split, the bit-depth draws and the dither.
        dither: Dither before quantizing.
    """
    if not corpus:
        raise ArgumentError("make_dataset needs a non-empty corpus")
    choices = [bits] if isinstance(bits, int) else list(bits)
    generator = torch.Generator().manual_seed(seed)
    assignment = _assign_splits(len(corpus), generator)
    drawn = torch.randint(len(choices), (len(corpus),), generator=generator).tolist()
    seeds = torch.randint(2**31 - 1, (len(corpus),), generator=generator)
    dither_seeds = seeds.tolist()

    pairs: List[ImagePair] = []
    split: Dict[str, Split] = {}
    for index, pristine in enumerate(corpus):
        image_id = f"img{index:04d}"
        depth = choices[drawn[index]]
        banded = synth_band(
            pristine, depth, dither_seed=dither_seeds[index] if dither else None
        )
        height, width = pristine.shape[-2:]
        for top, left in patch_grid(height, width, patch, stride):
            window = (slice(None), slice(top, top + patch), slice(left, left + patch))
            pair = ImagePair(
                pristine=pristine[window].clone(),
                banded=banded[window].clone(),
                id=f"{image_id}_{top:04d}_{left:04d}",
                source="synthetic",
                image_id=image_id,
                bits=depth,
                top=top,
                left=left,
            )
            pairs.append(pair)
            split[pair.id] = assignment[index]
    dataset = PatchDataset(pairs=pairs, split=split, patch_size=patch, seed=seed)
    logger.info("Built %d patch pairs, split %s", len(pairs), dataset.counts())
    return dataset


@dataclass(frozen=True)
class PaddedImage:
    padded: torch.Tensor
    original_size: Tuple[int, int]

    def crop(self, img: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Crop ``img`` (default: the padded image) back to the original size."""
        height, width = self.original_size
        source = self.padded if img is None else img
        return source[..., :height, :width]


def _symmetric_index(length: int, target: int) -> torch.Tensor:
    # Mirror including the edge sample: ... 2 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
    index = torch.arange(target) % (2 * length)
    return torch.where(index < length, index, 2 * length - 1 - index)


def pad_to_multiple(img: torch.Tensor, m: int) -> PaddedImage:
    """Symmetric-reflection pad right and bottom to the next multiple of ``m``."""
    if m < 1:
        raise ArgumentError(f"m must be at least 1, got {m}")
    height, width = img.shape[-2:]
    target_h = -(-height // m) * m
    target_w = -(-width // m) * m
    padded = img
    if target_h != height:
        padded = padded.index_select(-2, _symmetric_index(height, target_h))
    if target_w != width:
        padded = padded.index_select(-1, _symmetric_index(width, target_w))
    return PaddedImage(padded=padded, original_size=(height, width))


def _png_bit_depth(path: Path) -> Optional[int]:
    with path.open("rb") as f:
        header = f.read(25)
    if header[:8] == b"\x89PNG\r\n\x1a\n" and header[12:16] == b"IHDR":
        return header[24]
    return None


def load_image(path: PathLike) -> torch.Tensor:
    """Read an image as a ``(3, H, W)`` float32 tensor with values byte / 255.

    ``.npy`` files are read as H x W x 3 float arrays in [0, 1] (or uint8).
    Single-channel arrays (H x W or H x W x 1) are repeated to three channels
    the same way gray PNGs are.
    """
    path = Path(path)
    if path.suffix.lower() == ".npy":
        try:
            array = np.load(path, allow_pickle=False)
        except (OSError, ValueError) as e:
            raise DataIOError(f"Could not read {path}: {e}") from e
        if array.dtype == np.uint8:
            array = array.astype(np.float32) / 255.0
        if array.ndim == 2:
            array = array[..., None]
        if array.ndim == 3 and array.shape[-1] == 1:
            array = np.repeat(array, 3, axis=-1)
        if array.ndim != 3 or array.shape[-1] != 3:
            raise UnsupportedFormatError(
                f"{path}: expected an H x W x 3 array, got shape {array.shape}"
            )
        return torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32)).permute(
            2, 0, 1
        )

    try:
        depth = _png_bit_depth(path)
        with Image.open(path) as image:
            if image.mode not in _EIGHT_BIT_MODES or (depth is not None and depth > 8):
                raise UnsupportedFormatError(
                    f"{path}: only 8-bit images are supported, got mode "
                    f"{image.mode!r}"
                    + (f" with {depth}-bit samples" if depth else "")
                )
            array = np.asarray(image.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as e:
        if isinstance(e, DataIOError):
            raise
        raise DataIOError(f"Could not read {path}: {e}") from e
    return torch.from_numpy(array.copy()).permute(2, 0, 1).float() / 255.0


def save_image(img: torch.Tensor, path: PathLike) -> None:
    """Write a ``(C, H, W)`` tensor with C in {1, 3}.

    Image formats store ``floor(255 x + 0.5)`` of the clamped values (rounding
    half away from zero); ``.npy`` stores float32 H x W x C exactly.
    """
    path = Path(path)
    img = img.detach().cpu()
    if img.dim() != 3 or img.shape[0] not in (1, 3):
        raise DimensionError(f"Expected a (1|3, H, W) tensor, got {tuple(img.shape)}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.suffix.lower() == ".npy":
            np.save(path, img.permute(1, 2, 0).numpy().astype(np.float32))
            return
        values = torch.floor(img.clamp(0.0, 1.0) * 255.0 + 0.5).to(torch.uint8)
        array = values.permute(1, 2, 0).numpy()
        if array.shape[-1] == 1:
            array = array[..., 0]
        Image.fromarray(array).save(path)
    except (OSError, ValueError) as e:
        raise DataIOError(f"Could not write {path}: {e}") from e


def write_dataset(
    dataset: PatchDataset, out_dir: PathLike, image_format: str = "npy"
) -> List[ManifestRecord]:
    """Write pairs and ``manifest.jsonl`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for pair in dataset.pairs:
        pristine_name = f"{pair.id}_pristine.{image_format}"
        banded_name = f"{pair.id}_banded.{image_format}"
        save_image(pair.pristine, out_dir / pristine_name)
        save_image(pair.banded, out_dir / banded_name)
        records.append(
            ManifestRecord(
                id=pair.id,
                split=dataset.split[pair.id],
                source=pair.source,
                image_id=pair.image_id,
                bits=pair.bits,
                top=pair.top,
                left=pair.left,
                pristine=pristine_name,
                banded=banded_name,
            )
        )
    _manifest_serializer.write_lines(records, out_dir / MANIFEST_NAME)
    logger.info("Wrote %d pairs to %s", len(records), out_dir)
    return records


def _discover_pairs(data_dir: Path) -> List[Tuple[str, Path, Path]]:
    banded_by_id = {}
    for path in sorted(data_dir.iterdir()):
        if path.suffix.lower() in IMAGE_SUFFIXES and path.stem.endswith("_banded"):
            banded_by_id[path.stem[: -len("_banded")]] = path
    found = []
    for path in sorted(data_dir.iterdir()):
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        if not path.stem.endswith("_pristine"):
            continue
        pair_id = path.stem[: -len("_pristine")]
        if pair_id not in banded_by_id:
            log_warning_once(f"No banded counterpart for {path}; skipped")
            continue
        found.append((pair_id, path, banded_by_id[pair_id]))
    return found


def read_dataset(data_dir: PathLike, seed: int = 0) -> PatchDataset:
    """Load a dataset directory.

    With a manifest, splits and provenance come from it. Without one, every
    ``<id>_pristine.<ext>`` / ``<id>_banded.<ext>`` pair is imported as its
    own source image and split 70/20/10 with ``seed``.
    """
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataIOError(f"Dataset directory not found: {data_dir}")

    manifest = data_dir / MANIFEST_NAME
    if manifest.is_file():
        records = _manifest_serializer.read_lines(manifest)
    else:
        discovered = _discover_pairs(data_dir)
        if not discovered:
            raise DataIOError(f"No <id>_pristine/<id>_banded pairs in {data_dir}")
        generator = torch.Generator().manual_seed(seed)
        assignment = _assign_splits(len(discovered), generator)
        records = [
            ManifestRecord(
                id=pair_id,
                split=split,
                source="imported",
                image_id=pair_id,
                pristine=pristine.name,
                banded=banded.name,
            )
            for (pair_id, pristine, banded), split in zip(discovered, assignment)
        ]
        logger.info("Imported %d pairs from %s", len(records), data_dir)

    pairs = []
    for record in records:
        pairs.append(
            ImagePair(
                pristine=load_image(data_dir / record.pristine),
                banded=load_image(data_dir / record.banded),
                id=record.id,
                source=record.source,
                image_id=record.image_id,
                bits=record.bits,
                top=record.top,
                left=record.left,
            )
        )
    patch_size = int(pairs[0].pristine.shape[-1]) if pairs else 0
    return PatchDataset(
        pairs=pairs,
        split={record.id: record.split for record in records},
        patch_size=patch_size,
        seed=seed,
    )
