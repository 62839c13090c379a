"""Seeded training loop, validation and checkpoint loading.

The loss is L1 on the variant's final output: the raw network output for
``plain`` and the mask-fused image for ``dwt`` and ``map``, so that for the
latter two the mask-producing layers are inside the differentiated graph.
``wwm`` is never trained; it reuses a ``plain`` checkpoint at inference time.
"""

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Sequence, Tuple, Union

import torch

from wavedeband._errors import (
    ArgumentError,
    CheckpointError,
    DimensionError,
    RefusedError,
    TrainingFault,
)
from wavedeband.banddata import ImagePair, PatchDataset
from wavedeband.metrics import band_edge_index, psnr, ssim
from wavedeband.network import WaveMamba
from wavedeband.schema import (
    EvalRecord,
    NetConfig,
    Split,
    StepRecord,
    TrainConfig,
    TrainLog,
    TrainLogRecord,
    Variant,
)
from wavedeband.serialization import RecordSerializer, read_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_log_serializer = RecordSerializer(TrainLogRecord)

# Validation runs in chunks of this many pairs.
_EVAL_CHUNK = 8


@dataclass
class TrainResult:
    model: WaveMamba
    log: TrainLog
    step: int


@dataclass
class LoadedCheckpoint:
    model: WaveMamba
    variant: Variant
    step: int


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all elements."""
    if pred.shape != target.shape:
        raise DimensionError(
            f"Expected matching shapes, got {tuple(pred.shape)} and "
            f"{tuple(target.shape)}"
        )
    return (pred - target).abs().mean()


def batch_indices(
    count: int, batch: int, steps: int, generator: torch.Generator
) -> Iterator[List[int]]:
    """Indices for every step, drawn without replacement within an epoch.

    A fresh permutation starts whenever fewer than ``batch`` indices remain;
    with ``batch >= count`` every step sees the whole set in order.
    """
    order: List[int] = []
    for _ in range(steps):
        if batch >= count:
            yield list(range(count))
            continue
        if len(order) < batch:
            order = torch.randperm(count, generator=generator).tolist()
        chunk, order = order[:batch], order[batch:]
        yield chunk


def _stack(pairs: Sequence[ImagePair]) -> Tuple[torch.Tensor, torch.Tensor]:
    banded = torch.stack([pair.banded for pair in pairs])
    pristine = torch.stack([pair.pristine for pair in pairs])
    return banded, pristine


def _parameters_finite(model: torch.nn.Module) -> bool:
    return all(bool(torch.isfinite(p).all()) for p in model.parameters())


@torch.no_grad()
def validate(model: WaveMamba, pairs: Sequence[ImagePair], step: int) -> EvalRecord:
    """Mean PSNR, SSIM and BEI of the restored pairs, plus mask statistics."""
    if not pairs:
        raise ArgumentError("validate needs at least one pair")
    was_training = model.training
    model.eval()
    scores = {"psnr": 0.0, "ssim": 0.0, "bei": 0.0}
    masks = []
    for start in range(0, len(pairs), _EVAL_CHUNK):
        chunk = pairs[start : start + _EVAL_CHUNK]
        banded, pristine = _stack(chunk)
        output = model(banded)
        restored = output.restored.clamp(0.0, 1.0)
        for index in range(len(chunk)):
            scores["psnr"] += psnr(restored[index], pristine[index])
            scores["ssim"] += ssim(restored[index], pristine[index])
            scores["bei"] += band_edge_index(restored[index])
        if output.mask is not None:
            masks.append(output.mask.flatten())
    model.train(was_training)

    record = EvalRecord(step=step, **{k: v / len(pairs) for k, v in scores.items()})
    if masks:
        values = torch.cat(masks)
        record.mask_mean = float(values.mean())
        record.mask_high_fraction = float((values > 0.5).double().mean())
    return record


def train(model: WaveMamba, dataset: PatchDataset, cfg: TrainConfig) -> TrainResult:
    """Optimize ``model`` in place on the train split of ``dataset``.

    Adam with a constant learning rate; batches are sampled with a generator
    seeded by ``cfg.seed``. The validation split is scored every
    ``cfg.eval_every`` steps and after the last step, and a checkpoint is
    written at each of those points when ``cfg.checkpoint_path`` is set.

    Raises:
        RefusedError: for the wwm variant.
        TrainingFault: when the loss, the output or a parameter stops being
            finite; the message names the step.
    """
    variant = Variant(cfg.variant)
    if variant is Variant.WWM:
        raise RefusedError("wwm is inference-time; train plain")
    if variant is not model.config.variant:
        raise ArgumentError(
            f"Training variant {variant.value!r} does not match the network, "
            f"which was built for {model.config.variant.value!r}"
        )
    train_pairs = dataset.subset(Split.TRAIN)
    val_pairs = dataset.subset(Split.VAL)[: cfg.eval_limit]
    if not train_pairs or not val_pairs:
        raise ArgumentError(
            f"Training needs non-empty train and val splits, got "
            f"{len(train_pairs)} train and {len(val_pairs)} val pairs"
        )

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    generator = torch.Generator().manual_seed(cfg.seed)
    log = TrainLog()
    started = time.perf_counter()
    logger.info(
        "Training %s for %d steps on %d pairs (batch %d)",
        variant.value,
        cfg.steps,
        len(train_pairs),
        cfg.batch,
    )

    model.train()
    steps = batch_indices(len(train_pairs), cfg.batch, cfg.steps, generator)
    for step, indices in enumerate(steps, start=1):
        banded, pristine = _stack([train_pairs[i] for i in indices])
        try:
            output = model(banded)
        except TrainingFault as e:
            raise TrainingFault(f"Step {step}: {e}") from e
        loss = l1_loss(output.restored, pristine)
        value = float(loss)
        if not math.isfinite(value):
            raise TrainingFault(f"Step {step}: loss is {value}")

        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        if not _parameters_finite(model):
            raise TrainingFault(f"Step {step}: parameters became non-finite")
        log.losses.append(value)

        if step % cfg.log_every == 0:
            logger.info("step %d/%d loss %.6f", step, cfg.steps, value)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            record = validate(model, val_pairs, step)
            log.evals.append(record)
            mask_note = ""
            if record.mask_mean is not None:
                mask_note = (
                    f" mask mean {record.mask_mean:.4f}"
                    f" high {record.mask_high_fraction:.4f}"
                )
            logger.info(
                "step %d val psnr %.3f ssim %.4f bei %.5f%s",
                step,
                record.psnr,
                record.ssim,
                record.bei,
                mask_note,
            )
            if cfg.checkpoint_path is not None:
                save_checkpoint(model, cfg.checkpoint_path, variant=variant, step=step)

    model.eval()
    log.wall_clock = time.perf_counter() - started
    logger.info("Trained %d steps in %.1fs", cfg.steps, log.wall_clock)
    return TrainResult(model=model, log=log, step=cfg.steps)


def load_checkpoint(path: PathLike) -> LoadedCheckpoint:
    """Rebuild the network stored at ``path``; never returns partial state."""
    container = read_checkpoint(path)
    try:
        config = NetConfig.model_validate(container["config"])
        variant = Variant(container["variant"])
    except ValueError as e:
        raise CheckpointError(f"Checkpoint {path} has an invalid header: {e}") from e
    model = WaveMamba(config)
    try:
        model.load_state_dict(container["state_dict"], strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"Checkpoint {path} does not fit its config: {e}") from e
    model.eval()
    return LoadedCheckpoint(model=model, variant=variant, step=int(container["step"]))


def write_train_log(log: TrainLog, path: PathLike) -> None:
    """Write the log as JSON lines: one ``step`` record per step, ``eval``
    records after the step they were taken at."""
    _log_serializer.write_lines(
        (TrainLogRecord(record) for record in log.records()), path
    )


def read_train_log(path: PathLike) -> TrainLog:
    log = TrainLog()
    for wrapped in _log_serializer.read_lines(path):
        record = wrapped.root
        if isinstance(record, StepRecord):
            log.losses.append(record.loss)
        else:
            log.evals.append(record)
    return log


__all__ = [
    "LoadedCheckpoint",
    "TrainResult",
    "batch_indices",
    "l1_loss",
    "load_checkpoint",
    "read_train_log",
    "save_checkpoint",
    "train",
    "validate",
    "write_train_log",
]
