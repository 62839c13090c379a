import logging
from pathlib import Path
from typing import Any

import orjson
import pytest
from pydantic import BaseModel

from wavedeband import DataIOError, Split, Variant
from wavedeband.schema import EvalRecord, ManifestRecord, StepRecord, TrainLogRecord
from wavedeband.serialization import (
    RecordSerializer,
    dumps_json,
    log_warning_once,
    write_json,
)


def _manifest_record(**overrides: Any) -> ManifestRecord:
    values: dict = {
        "id": "img0000_0000_0032",
        "split": Split.TRAIN,
        "source": "synthetic",
        "image_id": "img0000",
        "bits": 4,
        "top": 0,
        "left": 32,
        "pristine": "img0000_0000_0032_pristine.npy",
        "banded": "img0000_0000_0032_banded.npy",
    }
    values.update(overrides)
    return ManifestRecord(**values)


@pytest.mark.parametrize(
    "record",
    [
        _manifest_record(),
        _manifest_record(source="imported", bits=None, split=Split.TEST),
    ],
)
def test_manifest_serialization(record: ManifestRecord) -> None:
    """There and back again! :)"""
    serializer = RecordSerializer(ManifestRecord)
    assert isinstance(serializer.dumps(record), bytes)
    assert serializer.loadd(serializer.dumpd(record)) == record
    assert serializer.loads(serializer.dumps(record)) == record


@pytest.mark.parametrize(
    "record,kind",
    [
        (StepRecord(step=3, loss=0.125), StepRecord),
        (EvalRecord(step=10, psnr=31.5, ssim=0.9, bei=0.01), EvalRecord),
        (
            EvalRecord(
                step=10,
                psnr=31.5,
                ssim=0.9,
                bei=0.01,
                mask_mean=0.2,
                mask_high_fraction=0.05,
            ),
            EvalRecord,
        ),
    ],
)
def test_train_log_records_use_their_kind(record: Any, kind: type) -> None:
    serializer = RecordSerializer(TrainLogRecord)
    wrapped = TrainLogRecord(record)
    back = serializer.loads(serializer.dumps(wrapped)).root
    assert isinstance(back, kind)
    assert back == record


def test_absent_optional_fields_are_not_written() -> None:
    serializer = RecordSerializer(TrainLogRecord)
    record = TrainLogRecord(EvalRecord(step=1, psnr=30.0, ssim=0.8, bei=0.0))
    assert "mask_mean" not in serializer.dumpd(record)


def test_lines_round_trip(tmp_path: Path) -> None:
    serializer = RecordSerializer(ManifestRecord)
    records = [_manifest_record(id=f"p{i}", image_id=f"p{i}") for i in range(3)]
    path = tmp_path / "manifest.jsonl"
    serializer.write_lines(records, path)
    assert path.read_bytes().count(b"\n") == 3
    assert serializer.read_lines(path) == records


def test_read_lines_skips_blank_lines_and_names_bad_ones(tmp_path: Path) -> None:
    serializer = RecordSerializer(ManifestRecord)
    path = tmp_path / "manifest.jsonl"
    good = serializer.dumps(_manifest_record())
    path.write_bytes(good + b"\n\n" + good + b"\n")
    assert len(serializer.read_lines(path)) == 2

    path.write_bytes(good + b"\n" + b'{"id": "x", "split": "nowhere"}\n')
    with pytest.raises(DataIOError, match="manifest.jsonl:2"):
        serializer.read_lines(path)
    path.write_bytes(b"{not json\n")
    with pytest.raises(DataIOError):
        serializer.read_lines(path)
    with pytest.raises(DataIOError):
        serializer.read_lines(tmp_path / "absent.jsonl")


class _Point(BaseModel):
    x: int
    variant: Variant


@pytest.mark.parametrize(
    "obj, expected",
    [
        ({"b": 1, "a": 2}, b'{"a":2,"b":1}'),
        ([1, 2, 3], b"[1,2,3]"),
        (Path("runs") / "plain", b'"runs/plain"'),
        (Variant.MAP, b'"map"'),
        (_Point(x=1, variant=Variant.DWT), b'{"variant":"dwt","x":1}'),
        (None, b"null"),
    ],
)
def test_dumps_json(obj: Any, expected: bytes) -> None:
    assert dumps_json(obj) == expected


def test_dumps_json_rejects_unknown_types() -> None:
    with pytest.raises(TypeError):
        dumps_json({"value": object()})


def test_write_json_is_pretty_and_terminated(tmp_path: Path) -> None:
    write_json({"z": [1], "a": {"c": 1, "b": 2}}, tmp_path / "out.json")
    text = (tmp_path / "out.json").read_text()
    assert text.endswith("}\n")
    assert text.index('"a"') < text.index('"z"')
    assert orjson.loads(text) == {"a": {"b": 2, "c": 1}, "z": [1]}
    with pytest.raises(DataIOError):
        write_json({}, tmp_path / "missing" / "out.json")


def test_log_warning_once(caplog: pytest.LogCaptureFixture) -> None:
    log_warning_once.cache_clear()
    with caplog.at_level(logging.WARNING):
        for _ in range(3):
            log_warning_once("file x.png skipped")
        log_warning_once("file y.png skipped")
    assert caplog.text.count("file x.png skipped") == 1
    assert caplog.text.count("file y.png skipped") == 1
