"""Serialization of run artifacts.

JSON artifacts (manifest, training log, report summary, echoed configuration)
are written with orjson and sorted keys so that two runs with the same seeds
produce byte-identical files.

Checkpoints are torch containers holding the network configuration, the named
parameter arrays, the variant the weights were trained for and the step
counter. Loading never returns partial state: a truncated or foreign file
raises CheckpointError.
"""

import abc
import logging
import pickle
import zipfile
from functools import lru_cache
from pathlib import Path
from typing import Any, Generic, Iterable, List, Type, TypeVar, Union

import orjson
import torch
from pydantic import BaseModel, ValidationError

from wavedeband._errors import CheckpointError, DataIOError
from wavedeband.schema import NetConfig, Variant

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "wavedeband-checkpoint"
CHECKPOINT_VERSION = 1

_JSON_OPTIONS = orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY

ModelT = TypeVar("ModelT", bound=BaseModel)
PathLike = Union[str, Path]


@lru_cache(maxsize=1_000)  # Will accommodate up to 1_000 different messages
def log_warning_once(message: str) -> None:
    """Log a warning once."""
    logger.warning(message)


def default(obj: Any) -> Any:
    """Default serialization for objects orjson does not know."""
    if isinstance(obj, BaseModel):
        return obj.model_dump(mode="json")
    if isinstance(obj, Path):
        return obj.as_posix()
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def dumps_json(obj: Any, *, indent: bool = False) -> bytes:
    """Dump an object to deterministic JSON bytes (sorted keys)."""
    options = _JSON_OPTIONS | (orjson.OPT_INDENT_2 if indent else 0)
    return orjson.dumps(obj, default=default, option=options)


def write_json(obj: Any, path: PathLike) -> None:
    """Write a pretty, deterministic JSON document terminated by a newline."""
    try:
        Path(path).write_bytes(dumps_json(obj, indent=True) + b"\n")
    except OSError as e:
        raise DataIOError(f"Could not write {path}: {e}") from e


# PUBLIC API


class Serializer(abc.ABC, Generic[ModelT]):
    def dumpd(self, obj: ModelT) -> Any:
        """Convert the given record to a JSON serializable object."""
        return orjson.loads(self.dumps(obj))

    def loads(self, s: bytes) -> ModelT:
        """Load the given JSON byte string."""
        return self.loadd(orjson.loads(s))

    @abc.abstractmethod
    def dumps(self, obj: ModelT) -> bytes:
        """Dump the given record to a JSON byte string."""

    @abc.abstractmethod
    def loadd(self, obj: Any) -> ModelT:
        """Given a python object, validate it into a record.

        The obj represents content that was json loaded from a string, but
        not yet validated.
        """


class RecordSerializer(Serializer[ModelT]):
    """Serializer for one pydantic record type, one record per line.

    Used for the dataset manifest and the training log; both are line-delimited
    so that a partially written file is still readable up to the last line.
    """

    def __init__(self, model: Type[ModelT]) -> None:
        self.model = model

    def dumps(self, obj: ModelT) -> bytes:
        return dumps_json(obj.model_dump(mode="json", exclude_none=True))

    def loadd(self, obj: Any) -> ModelT:
        return self.model.model_validate(obj)

    def write_lines(self, records: Iterable[ModelT], path: PathLike) -> None:
        """Write records to ``path`` as JSON lines."""
        payload = b"".join(self.dumps(record) + b"\n" for record in records)
        try:
            Path(path).write_bytes(payload)
        except OSError as e:
            raise DataIOError(f"Could not write {path}: {e}") from e

    def read_lines(self, path: PathLike) -> List[ModelT]:
        """Read and validate every non-empty line of ``path``."""
        try:
            raw = Path(path).read_bytes()
        except OSError as e:
            raise DataIOError(f"Could not read {path}: {e}") from e
        records = []
        for number, line in enumerate(raw.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                records.append(self.loads(line))
            except (orjson.JSONDecodeError, ValidationError) as e:
                raise DataIOError(f"Invalid record at {path}:{number}: {e}") from e
        return records


def save_checkpoint(
    model: torch.nn.Module,
    path: PathLike,
    *,
    variant: Variant = Variant.PLAIN,
    step: int = 0,
) -> None:
    """Write a versioned checkpoint for ``model``.

    Args:
        model: A network exposing a ``config`` attribute of type NetConfig.
        path: Destination file. Parent directories are created.
        variant: The variant the weights were trained for.
        step: Training step counter at the time of saving.
    """
    config: NetConfig = getattr(model, "config")
    container = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.model_dump(mode="json"),
        "variant": Variant(variant).value,
        "step": int(step),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
    }
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(container, path)
    except OSError as e:
        raise DataIOError(f"Could not write checkpoint {path}: {e}") from e


def read_checkpoint(path: PathLike) -> dict:
    """Read and validate the raw checkpoint container."""
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"Checkpoint not found: {path}")
    try:
        container = torch.load(path, map_location="cpu", weights_only=True)
    except (
        RuntimeError, EOFError, ValueError, pickle.UnpicklingError, zipfile.BadZipFile
    ) as e:
        raise CheckpointError(f"Corrupted checkpoint {path}: {e}") from e

    if not isinstance(container, dict) or container.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    found = container.get("version")
    if found != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"Checkpoint version mismatch in {path}: expected "
            f"{CHECKPOINT_VERSION}, found {found}"
        )
    missing = {"config", "variant", "step", "state_dict"} - set(container)
    if missing:
        raise CheckpointError(f"Checkpoint {path} lacks fields {sorted(missing)}")
    return container
