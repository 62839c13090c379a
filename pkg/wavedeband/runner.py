"""Implementations behind the ``wavedeband`` subcommands.

Each ``cmd_*`` function takes a resolved RunConfig plus its positional inputs,
does its work, echoes the configuration into its output directory as
``config.json`` and returns a small summary. Argument parsing lives in
``wavedeband.cli``.

Configuration files are flat ``key = value`` text::

    # comments start with a hash
    seed = 3
    net.base_channels = 16
    data.bits = [3, 4, 5]
    train.variant = "map"

Values are parsed as JSON (so lists and numbers work); anything that is not
valid JSON is taken as a bare string.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import orjson
import torch
from pydantic import ValidationError

from wavedeband._errors import (
    ArgumentError,
    ConfigError,
    DataIOError,
    EvaluationError,
    RefusedError,
)
from wavedeband.banddata import (
    IMAGE_SUFFIXES,
    MANIFEST_NAME,
    PatchDataset,
    gen_gradient_corpus,
    load_image,
    make_dataset,
    pad_to_multiple,
    read_dataset,
    save_image,
    write_dataset,
)
from wavedeband.freqmask import fuse, wwm_mask
from wavedeband.metrics import (
    BASELINE_VARIANT,
    EvaluationTriple,
    evaluate,
    merge_reports,
    write_report,
)
from wavedeband.network import WaveMamba, expected_parameter_count, restore
from wavedeband.schema import MetricReport, RunConfig, Split, Variant
from wavedeband.serialization import (
    CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
    log_warning_once,
    read_checkpoint,
    write_json,
)
from wavedeband.trainer import LoadedCheckpoint, load_checkpoint, train, write_train_log
from wavedeband.version import __version__

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CONFIG_ECHO_NAME = "config.json"
CHECKPOINT_NAME = "checkpoint.pt"
TRAIN_LOG_NAME = "train_log.jsonl"

# Which inference variants a checkpoint trained for a given variant supports.
COMPATIBLE_VARIANTS: Mapping[Variant, Tuple[Variant, ...]] = {
    Variant.PLAIN: (Variant.PLAIN, Variant.WWM),
    Variant.DWT: (Variant.DWT,),
    Variant.MAP: (Variant.MAP,),
}


# Configuration


def _parse_value(raw: str) -> Any:
    try:
        return orjson.loads(raw)
    except orjson.JSONDecodeError:
        return raw


def parse_assignment(line: str, source: str = "--set") -> Tuple[str, Any]:
    """Split ``key = value`` (or ``key=value``) into a dotted key and a value."""
    key, sep, raw = line.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"{source}: expected 'key = value', got {line!r}")
    return key, _parse_value(raw.strip())


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    """Parse a flat config file into ``{dotted key: value}``."""
    values: Dict[str, Any] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = parse_assignment(line, f"{source}:{number}")
        values[key] = value
    return values


def _nest(flat: Mapping[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        node = nested
        *parents, leaf = key.split(".")
        for part in parents:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Config key {key!r} conflicts with {part!r}")
            node = child
        node[leaf] = value
    return nested


def resolve_config(
    config_path: Optional[PathLike] = None,
    overrides: Sequence[str] = (),
    flags: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Merge defaults < config file < ``--set`` overrides < dedicated flags.

    ``flags`` maps dotted keys to values; ``None`` values are ignored so that
    unset command line flags do not mask file values.
    """
    flat: Dict[str, Any] = {}
    if config_path is not None:
        path = Path(config_path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise DataIOError(f"Could not read config file {path}: {e}") from e
        flat.update(parse_config_text(text, str(path)))
    for assignment in overrides:
        key, value = parse_assignment(assignment)
        flat[key] = value
    flat.update({k: v for k, v in (flags or {}).items() if v is not None})
    try:
        return RunConfig.model_validate(_nest(flat))
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def echo_config(
    cfg: RunConfig, out_dir: PathLike, extra: Optional[Mapping[str, Any]] = None
) -> None:
    """Write the configuration a command ran with, plus any ``extra`` keys."""
    echoed = cfg.model_dump(mode="json")
    echoed.update(extra or {})
    write_json(echoed, Path(out_dir) / CONFIG_ECHO_NAME)


def prepare_out_dir(out_dir: PathLike, force: bool = False) -> Path:
    """Create ``out_dir``; refuse a non-empty one unless ``force`` is set."""
    out_dir = Path(out_dir)
    if out_dir.exists() and not out_dir.is_dir():
        raise DataIOError(f"Output path {out_dir} exists and is not a directory")
    if out_dir.is_dir() and any(out_dir.iterdir()) and not force:
        raise RefusedError(
            f"Output directory {out_dir} is not empty; pass --force to overwrite"
        )
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataIOError(f"Could not create {out_dir}: {e}") from e
    return out_dir


def _clear_dataset_files(out_dir: Path) -> None:
    for path in out_dir.iterdir():
        stem = path.stem
        ours = path.suffix.lower() in IMAGE_SUFFIXES and (
            stem.endswith("_pristine") or stem.endswith("_banded")
        )
        if ours or path.name in (MANIFEST_NAME, CONFIG_ECHO_NAME):
            path.unlink()


# Subcommands


def cmd_synth(
    cfg: RunConfig, out_dir: PathLike, force: bool = False
) -> Dict[str, int]:
    """Generate a gradient corpus, band it and write the dataset directory."""
    out_dir = prepare_out_dir(out_dir, force)
    _clear_dataset_files(out_dir)
    data = cfg.data
    corpus = gen_gradient_corpus(data.corpus_size, data.image_size, cfg.seed)
    dataset = make_dataset(
        corpus, data.bits, data.patch, data.stride, cfg.seed, dither=data.dither
    )
    write_dataset(dataset, out_dir, data.format)
    echo_config(cfg, out_dir)
    return dataset.counts()


def cmd_train(
    cfg: RunConfig, data_dir: PathLike, out_dir: PathLike, force: bool = False
) -> Path:
    """Train the configured variant; returns the checkpoint path."""
    variant = Variant(cfg.train.variant)
    if variant is Variant.WWM:
        raise RefusedError("wwm is inference-time; train plain")
    dataset = read_dataset(data_dir, seed=cfg.seed)
    out_dir = prepare_out_dir(out_dir, force)

    # The network is built for the variant it is trained as.
    net = cfg.net.model_copy(update={"variant": variant})
    cfg = cfg.model_copy(update={"net": net})
    torch.manual_seed(cfg.train.seed)
    model = WaveMamba(cfg.net)
    checkpoint = out_dir / CHECKPOINT_NAME
    result = train(
        model, dataset, cfg.train.model_copy(update={"checkpoint_path": checkpoint})
    )
    write_train_log(result.log, out_dir / TRAIN_LOG_NAME)
    echo_config(cfg, out_dir)
    return checkpoint


def check_compatible(trained: Variant, requested: Variant) -> None:
    if requested not in COMPATIBLE_VARIANTS[trained]:
        raise ArgumentError(
            f"A checkpoint trained as {trained.value!r} cannot run variant "
            f"{requested.value!r}; it supports "
            f"{[v.value for v in COMPATIBLE_VARIANTS[trained]]}"
        )


def _resolve_variant(
    loaded: LoadedCheckpoint, variant: Optional[Union[Variant, str]]
) -> Variant:
    requested = loaded.variant if variant is None else Variant(variant)
    check_compatible(loaded.variant, requested)
    return requested


def _list_images(input_path: Path) -> List[Path]:
    if input_path.is_file():
        return [input_path]
    if input_path.is_dir():
        return sorted(
            p
            for p in input_path.iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
        )
    raise DataIOError(f"Input not found: {input_path}")


def cmd_infer(
    cfg: RunConfig,
    checkpoint: PathLike,
    input_path: PathLike,
    out_dir: PathLike,
    *,
    variant: Optional[Union[Variant, str]] = None,
    image_format: str = "png",
    force: bool = False,
) -> List[Path]:
    """Restore one image or every image of a directory.

    Writes ``<stem>_restored.<ext>`` and, for mask variants,
    ``<stem>_mask.<ext>``. Unreadable inputs are warned about and skipped.
    """
    loaded = load_checkpoint(checkpoint)
    requested = _resolve_variant(loaded, variant)
    images = _list_images(Path(input_path))
    out_dir = prepare_out_dir(out_dir, force)

    written = []
    for path in images:
        try:
            img = load_image(path)
        except DataIOError as e:
            log_warning_once(f"Skipping {path}: {e}")
            continue
        output = restore(loaded.model, img, requested)
        target = out_dir / f"{path.stem}_restored.{image_format}"
        save_image(output.restored, target)
        written.append(target)
        if output.mask is not None:
            save_image(output.mask, out_dir / f"{path.stem}_mask.{image_format}")
    if not written:
        raise DataIOError(f"No readable images in {input_path}")
    # The network that ran is the checkpoint's, not the one the flags describe.
    echo_config(
        cfg.model_copy(update={"net": loaded.model.config}),
        out_dir,
        {"checkpoint": Path(checkpoint).as_posix(), "variant": requested.value},
    )
    logger.info("Restored %d images with %s into %s", len(written), requested, out_dir)
    return written


@dataclass
class EvalRun:
    """One (checkpoint, variant) column group of a comparative report."""

    checkpoint: Path
    variant: Optional[Variant] = None

    @classmethod
    def parse(cls, text: str) -> "EvalRun":
        """Parse ``CHECKPOINT[:VARIANT]``."""
        path, sep, variant = text.rpartition(":")
        if sep and variant in {v.value for v in Variant}:
            return cls(checkpoint=Path(path), variant=Variant(variant))
        return cls(checkpoint=Path(text))


def _restored_triples(
    model: WaveMamba, pairs: Sequence[Any], variant: Variant, batch: int
) -> List[EvaluationTriple]:
    triples = []
    for start in range(0, len(pairs), batch):
        chunk = pairs[start : start + batch]
        output = restore(model, torch.stack([p.banded for p in chunk]), variant)
        for index, pair in enumerate(chunk):
            triples.append(
                EvaluationTriple(
                    image_id=pair.id,
                    pristine=pair.pristine,
                    banded=pair.banded,
                    restored=output.restored[index],
                    mask=None if output.mask is None else output.mask[index],
                )
            )
    return triples


def _eval_pairs(dataset: PatchDataset, split: Union[Split, str]) -> List[Any]:
    pairs = dataset.subset(split)
    if not pairs:
        raise EvaluationError(f"Split {getattr(split, 'value', split)!r} is empty")
    return pairs


def cmd_eval(
    cfg: RunConfig,
    data_dir: PathLike,
    runs: Sequence[Union[EvalRun, str]],
    out_dir: PathLike,
    force: bool = False,
) -> MetricReport:
    """Score the banded baseline and every run on one split of a dataset.

    Writes ``report.tsv`` and ``summary.json``; see ``wavedeband.metrics``.
    """
    dataset = read_dataset(data_dir, seed=cfg.seed)
    pairs = _eval_pairs(dataset, cfg.eval.split)
    parsed = [EvalRun.parse(r) if isinstance(r, str) else r for r in runs]
    out_dir = prepare_out_dir(out_dir, force)
    external = dict(cfg.eval.external_metrics)
    timeout = cfg.eval.external_timeout

    baseline = [
        EvaluationTriple(p.id, p.pristine, p.banded, restored=p.banded) for p in pairs
    ]
    reports = [
        evaluate(
            baseline,
            BASELINE_VARIANT,
            external_metrics=external,
            external_timeout=timeout,
        )
    ]
    labels = {BASELINE_VARIANT}
    models: Dict[Path, LoadedCheckpoint] = {}
    echoed_runs: List[Dict[str, Any]] = []
    for run in parsed:
        if run.checkpoint not in models:
            models[run.checkpoint] = load_checkpoint(run.checkpoint)
        loaded = models[run.checkpoint]
        variant = _resolve_variant(loaded, run.variant)
        label = variant.value
        if label in labels:
            label = f"{variant.value}@{run.checkpoint.as_posix()}"
        labels.add(label)
        echoed_runs.append(
            {
                "checkpoint": run.checkpoint.as_posix(),
                "label": label,
                "variant": variant.value,
                "net": loaded.model.config.model_dump(mode="json"),
            }
        )
        logger.info("Evaluating %s on %d pairs", label, len(pairs))
        triples = _restored_triples(loaded.model, pairs, variant, cfg.eval.batch)
        reports.append(
            evaluate(
                triples, label, external_metrics=external, external_timeout=timeout
            )
        )

    report = merge_reports(reports)
    write_report(report, out_dir)
    echo_config(cfg, out_dir, {"runs": echoed_runs})
    return report


def fuse_external(
    banded_path: PathLike, restored_path: PathLike, depth: int = 3
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Fuse any restorer's output with its banded input using the WWM mask.

    Returns ``(fused, mask)`` at the input resolution.
    """
    banded = load_image(banded_path)
    restored = load_image(restored_path)
    if banded.shape != restored.shape:
        raise ArgumentError(
            f"{banded_path} is {tuple(banded.shape)} but {restored_path} is "
            f"{tuple(restored.shape)}"
        )
    padded = pad_to_multiple(banded.unsqueeze(0), 2**depth)
    padded_restored = pad_to_multiple(restored.unsqueeze(0), 2**depth).padded
    mask = wwm_mask(padded.padded, depth)
    fused = fuse(padded.padded, padded_restored, mask)
    return padded.crop(fused)[0], padded.crop(mask)[0]


def cmd_fuse(
    cfg: RunConfig,
    banded_path: PathLike,
    restored_path: PathLike,
    out_dir: PathLike,
    *,
    image_format: str = "png",
    force: bool = False,
) -> Path:
    fused, mask = fuse_external(banded_path, restored_path, cfg.net.depth)
    out_dir = prepare_out_dir(out_dir, force)
    stem = Path(banded_path).stem
    target = out_dir / f"{stem}_fused.{image_format}"
    save_image(fused, target)
    save_image(mask, out_dir / f"{stem}_mask.{image_format}")
    echo_config(cfg, out_dir)
    return target


def cmd_info(cfg: RunConfig, target: Optional[PathLike] = None) -> Dict[str, Any]:
    """Describe a checkpoint file, a dataset directory, or the resolved config."""
    info: Dict[str, Any] = {"version": __version__}
    if target is None:
        info["config"] = cfg.model_dump(mode="json")
        info["parameters"] = expected_parameter_count(cfg.net)
        return info
    target = Path(target)
    if target.is_dir():
        dataset = read_dataset(target, seed=cfg.seed)
        info["dataset"] = {
            "path": target.as_posix(),
            "pairs": len(dataset.pairs),
            "patch_size": dataset.patch_size,
            "splits": dataset.counts(),
            "sources": sorted({p.source for p in dataset.pairs}),
            "images": len({p.image_id for p in dataset.pairs}),
        }
        return info
    container = read_checkpoint(target)
    model = load_checkpoint(target).model
    info["checkpoint"] = {
        "path": target.as_posix(),
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "variant": container["variant"],
        "step": container["step"],
        "config": container["config"],
        "parameters": model.parameter_count,
    }
    return info
