from pathlib import Path
from typing import Any, Dict, List

import orjson
import pytest
import torch

from wavedeband import (
    ArgumentError,
    ConfigError,
    DataIOError,
    RefusedError,
    RunConfig,
    Variant,
    WaveMamba,
    cmd_eval,
    cmd_fuse,
    cmd_info,
    cmd_infer,
    cmd_synth,
    cmd_train,
    fuse,
    fuse_external,
    load_checkpoint,
    load_image,
    resolve_config,
    save_image,
    synth_band,
    wwm_mask,
)
from wavedeband.cli import main
from wavedeband.runner import (
    CHECKPOINT_NAME,
    CONFIG_ECHO_NAME,
    TRAIN_LOG_NAME,
    EvalRun,
    parse_config_text,
)
from wavedeband.serialization import log_warning_once

SMALL: Dict[str, Any] = {
    "data.corpus_size": 5,
    "data.image_size": 32,
    "data.bits": [3],
    "data.patch": 32,
    "data.stride": 32,
    "net.base_channels": 8,
    "net.depth": 2,
    "net.state_dim": 4,
    "train.steps": 2,
    "train.batch": 2,
    "train.eval_every": 1,
}


def _cfg(**flat: Any) -> RunConfig:
    return resolve_config(flags={**SMALL, **flat})


def _small_args() -> List[str]:
    args = []
    for key, value in SMALL.items():
        args.extend(["--set", f"{key}={orjson.dumps(value).decode()}"])
    return args


def _tree(root: Path) -> Dict[str, bytes]:
    return {
        path.relative_to(root).as_posix(): path.read_bytes()
        for path in sorted(root.rglob("*"))
        if path.is_file()
    }


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory: pytest.TempPathFactory) -> Path:
    out = tmp_path_factory.mktemp("data")
    cmd_synth(_cfg(), out)
    return out


@pytest.fixture(scope="module")
def plain_checkpoint(tmp_path_factory: pytest.TempPathFactory, data_dir: Path) -> Path:
    return cmd_train(_cfg(), data_dir, tmp_path_factory.mktemp("plain"))


@pytest.fixture(autouse=True)
def _fresh_warnings() -> None:
    log_warning_once.cache_clear()


def test_parse_config_text() -> None:
    text = """
    # comment line
    seed = 3
    data.bits = [3, 4]   # trailing comment
    train.variant = map
    train.learning_rate=1e-3
    """
    assert parse_config_text(text) == {
        "seed": 3,
        "data.bits": [3, 4],
        "train.variant": "map",
        "train.learning_rate": 1e-3,
    }
    with pytest.raises(ConfigError, match="<config>:2"):
        parse_config_text("seed = 1\nno equals sign here")


def test_resolve_config_precedence(tmp_path: Path) -> None:
    path = tmp_path / "run.cfg"
    path.write_text("seed = 1\ntrain.steps = 10\nnet.base_channels = 32\n")
    from_file = resolve_config(path)
    assert from_file.seed == 1
    assert from_file.train.steps == 10
    assert from_file.train.seed == 1

    overridden = resolve_config(path, ["train.steps=20"])
    assert overridden.train.steps == 20
    assert overridden.net.base_channels == 32

    flagged = resolve_config(
        path, ["train.steps=20"], {"train.steps": 30, "seed": None}
    )
    assert flagged.train.steps == 30
    assert flagged.seed == 1


def test_resolve_config_seeds() -> None:
    assert resolve_config(flags={"seed": 7}).train.seed == 7
    pinned = resolve_config(overrides=["train.seed=3"], flags={"seed": 7})
    assert pinned.train.seed == 3


@pytest.mark.parametrize(
    "overrides",
    [["net.unknown=1"], ["data.bits=[9]"], ["train.steps=0"], ["net.depth.x=1"]],
)
def test_resolve_config_rejects_bad_values(overrides: List[str]) -> None:
    with pytest.raises(ConfigError) as info:
        resolve_config(overrides=overrides)
    assert isinstance(info.value, ArgumentError)


def test_resolve_config_missing_file(tmp_path: Path) -> None:
    with pytest.raises(DataIOError):
        resolve_config(tmp_path / "absent.cfg")


def test_synth_writes_a_split_dataset(data_dir: Path) -> None:
    manifest = (data_dir / "manifest.jsonl").read_text().splitlines()
    assert len(manifest) == 5
    splits = sorted(orjson.loads(line)["split"] for line in manifest)
    assert splits == ["test", "train", "train", "train", "val"]
    echoed = orjson.loads((data_dir / CONFIG_ECHO_NAME).read_bytes())
    assert echoed == _cfg().model_dump(mode="json")


def test_synth_is_deterministic(tmp_path: Path) -> None:
    assert cmd_synth(_cfg(), tmp_path / "a") == {"train": 3, "val": 1, "test": 1}
    cmd_synth(_cfg(), tmp_path / "b")
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_synth_refuses_non_empty_directories(tmp_path: Path) -> None:
    cmd_synth(_cfg(), tmp_path)
    with pytest.raises(RefusedError):
        cmd_synth(_cfg(), tmp_path)
    cmd_synth(_cfg(**{"data.stride": 16, "data.patch": 16}), tmp_path, force=True)
    assert len((tmp_path / "manifest.jsonl").read_text().splitlines()) == 5 * 4
    assert len(list(tmp_path.glob("*_banded.npy"))) == 5 * 4


def test_main_reports_bad_bit_depth(
    tmp_path: Path, capsys: pytest.CaptureFixture
) -> None:
    code = main(["synth", "--bits", "9", "--out", str(tmp_path / "d")])
    assert code == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("E_CONFIG: ")
    assert "\n" not in err
    assert not (tmp_path / "d").exists()


def test_main_requires_out(capsys: pytest.CaptureFixture) -> None:
    assert main(["synth"]) == 1
    assert capsys.readouterr().err.startswith("E_ARG: --out is required")


@pytest.mark.parametrize(
    "argv,fragment",
    [
        (["synth", "--seed", "abc"], "invalid int value"),
        (["frobnicate"], "invalid choice"),
        ([], "required"),
        (["train", "--variant", "bogus"], "invalid choice"),
    ],
)
def test_main_reports_usage_errors_as_one_line(
    argv: List[str], fragment: str, capsys: pytest.CaptureFixture
) -> None:
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert err.startswith("E_ARG: wavedeband")
    assert fragment in err
    assert err.count("\n") == 1


def test_main_synth(tmp_path: Path) -> None:
    code = main(["synth", *_small_args(), "--seed", "4", "--out", str(tmp_path)])
    assert code == 0
    echoed = orjson.loads((tmp_path / CONFIG_ECHO_NAME).read_bytes())
    assert echoed["seed"] == 4


def test_train_writes_checkpoint_log_and_config(plain_checkpoint: Path) -> None:
    run_dir = plain_checkpoint.parent
    assert plain_checkpoint.name == CHECKPOINT_NAME
    loaded = load_checkpoint(plain_checkpoint)
    assert loaded.variant is Variant.PLAIN
    assert loaded.step == 2
    records = [
        orjson.loads(line)
        for line in (run_dir / TRAIN_LOG_NAME).read_text().splitlines()
    ]
    assert [r["kind"] for r in records] == ["step", "eval", "step", "eval"]
    echoed = orjson.loads((run_dir / CONFIG_ECHO_NAME).read_bytes())
    assert echoed["net"]["variant"] == "plain"


def test_train_map_logs_mask_statistics(data_dir: Path, tmp_path: Path) -> None:
    checkpoint = cmd_train(_cfg(**{"train.variant": "map"}), data_dir, tmp_path)
    assert load_checkpoint(checkpoint).variant is Variant.MAP
    evals = [
        orjson.loads(line)
        for line in (tmp_path / TRAIN_LOG_NAME).read_text().splitlines()
        if '"eval"' in line
    ]
    assert evals and all("mask_mean" in r and "mask_high_fraction" in r for r in evals)


def test_train_refuses_wwm(
    data_dir: Path, tmp_path: Path, capsys: pytest.CaptureFixture
) -> None:
    with pytest.raises(RefusedError, match="wwm is inference-time; train plain"):
        cmd_train(_cfg(**{"train.variant": "wwm"}), data_dir, tmp_path / "x")
    code = main(["train", str(data_dir), "--variant", "wwm", "--out", str(tmp_path)])
    assert code == 1
    err = capsys.readouterr().err
    assert err == "E_REFUSED: wwm is inference-time; train plain\n"


def test_train_missing_dataset(tmp_path: Path) -> None:
    with pytest.raises(DataIOError, match="nowhere"):
        cmd_train(_cfg(), tmp_path / "nowhere", tmp_path / "out")


def _input_image(path: Path, height: int, width: int) -> torch.Tensor:
    ramp = torch.linspace(0.1, 0.8, width).view(1, 1, width).repeat(3, height, 1)
    img = synth_band(ramp, 4)
    save_image(img, path)
    return load_image(path)


def test_infer_keeps_input_size(plain_checkpoint: Path, tmp_path: Path) -> None:
    _input_image(tmp_path / "photo.png", 30, 45)
    written = cmd_infer(
        _cfg(), plain_checkpoint, tmp_path / "photo.png", tmp_path / "out"
    )
    assert [p.name for p in written] == ["photo_restored.png"]
    assert load_image(written[0]).shape == (3, 30, 45)
    assert not (tmp_path / "out" / "photo_mask.png").exists()


def test_infer_wwm_matches_external_fusion(
    plain_checkpoint: Path, tmp_path: Path
) -> None:
    img = _input_image(tmp_path / "in.png", 32, 48)
    cmd_infer(
        _cfg(),
        plain_checkpoint,
        tmp_path / "in.png",
        tmp_path / "out",
        variant="wwm",
        image_format="npy",
    )
    restored = load_image(tmp_path / "out" / "in_restored.npy")
    model = load_checkpoint(plain_checkpoint).model
    with torch.no_grad():
        raw = model(img[None], variant="plain").raw
    depth = model.config.depth
    expected = fuse(img[None], raw, wwm_mask(img[None], depth))[0]
    assert float((restored - expected).abs().max()) < 1e-6
    mask = load_image(tmp_path / "out" / "in_mask.npy")
    assert torch.allclose(mask[0], wwm_mask(img[None], depth)[0, 0], atol=1e-6)


def test_infer_directory_skips_unreadable_files(
    plain_checkpoint: Path, tmp_path: Path
) -> None:
    inputs = tmp_path / "inputs"
    inputs.mkdir()
    _input_image(inputs / "a.png", 16, 16)
    _input_image(inputs / "b.png", 20, 24)
    (inputs / "broken.png").write_bytes(b"definitely not a png")
    (inputs / "readme.txt").write_text("not an image")
    written = cmd_infer(_cfg(), plain_checkpoint, inputs, tmp_path / "out")
    assert sorted(p.name for p in written) == ["a_restored.png", "b_restored.png"]
    assert (tmp_path / "out" / CONFIG_ECHO_NAME).is_file()


def test_infer_echoes_the_checkpoint_network(
    plain_checkpoint: Path, tmp_path: Path
) -> None:
    _input_image(tmp_path / "in.png", 16, 16)
    cfg = _cfg(**{"net.base_channels": 16})
    out = tmp_path / "out"
    cmd_infer(cfg, plain_checkpoint, tmp_path / "in.png", out, variant="wwm")
    echoed = orjson.loads((out / CONFIG_ECHO_NAME).read_bytes())
    trained = load_checkpoint(plain_checkpoint).model.config
    assert echoed["net"] == trained.model_dump(mode="json")
    assert echoed["net"]["base_channels"] == 8
    assert echoed["variant"] == "wwm"
    assert echoed["checkpoint"] == plain_checkpoint.as_posix()


def test_infer_rejects_incompatible_variants(
    plain_checkpoint: Path, tmp_path: Path
) -> None:
    _input_image(tmp_path / "in.png", 16, 16)
    with pytest.raises(ArgumentError, match="'plain'.*'dwt'"):
        cmd_infer(
            _cfg(),
            plain_checkpoint,
            tmp_path / "in.png",
            tmp_path / "o",
            variant="dwt",
        )


def test_eval_compares_variants_with_baseline(
    data_dir: Path, plain_checkpoint: Path, tmp_path: Path
) -> None:
    runs = [f"{plain_checkpoint}:plain", f"{plain_checkpoint}:wwm"]
    report = cmd_eval(_cfg(), data_dir, runs, tmp_path / "a")
    assert [s.variant for s in report.summaries] == ["banded", "plain", "wwm"]
    assert [row.variant for row in report.rows] == ["banded", "plain", "wwm"]
    baseline = report.rows[0]
    assert baseline.delta_psnr == 0.0 and baseline.delta_bei == 0.0
    assert report.rows[2].mask_mean is not None

    cmd_eval(_cfg(), data_dir, runs, tmp_path / "b")
    for name in ("report.tsv", "summary.json"):
        first = (tmp_path / "a" / name).read_bytes()
        assert first == (tmp_path / "b" / name).read_bytes()


def test_eval_echoes_each_run_network(
    data_dir: Path, plain_checkpoint: Path, tmp_path: Path
) -> None:
    runs = [f"{plain_checkpoint}:plain", f"{plain_checkpoint}:wwm"]
    cfg = _cfg(**{"net.base_channels": 16})
    cmd_eval(cfg, data_dir, runs, tmp_path)
    echoed = orjson.loads((tmp_path / CONFIG_ECHO_NAME).read_bytes())
    trained = load_checkpoint(plain_checkpoint).model.config.model_dump(mode="json")
    assert [run["variant"] for run in echoed["runs"]] == ["plain", "wwm"]
    assert [run["label"] for run in echoed["runs"]] == ["plain", "wwm"]
    for run in echoed["runs"]:
        assert run["checkpoint"] == plain_checkpoint.as_posix()
        assert run["net"] == trained


def test_eval_on_all_pairs_and_duplicate_labels(
    data_dir: Path, plain_checkpoint: Path, tmp_path: Path
) -> None:
    runs = [EvalRun(plain_checkpoint), EvalRun(plain_checkpoint, Variant.PLAIN)]
    report = cmd_eval(_cfg(**{"eval.split": "all"}), data_dir, runs, tmp_path)
    labels = [s.variant for s in report.summaries]
    assert labels == ["banded", "plain", f"plain@{plain_checkpoint.as_posix()}"]
    assert all(s.count == 5 for s in report.summaries)


def test_eval_run_parse() -> None:
    assert EvalRun.parse("runs/a.pt:wwm") == EvalRun(Path("runs/a.pt"), Variant.WWM)
    assert EvalRun.parse("runs/a.pt") == EvalRun(Path("runs/a.pt"))
    assert EvalRun.parse("c:/runs/a.pt") == EvalRun(Path("c:/runs/a.pt"))


def test_info(data_dir: Path, plain_checkpoint: Path) -> None:
    bare = cmd_info(_cfg())
    assert set(bare) == {"version", "config", "parameters"}
    assert bare["parameters"] == WaveMamba(_cfg().net).parameter_count

    dataset = cmd_info(_cfg(), data_dir)["dataset"]
    assert dataset["splits"] == {"train": 3, "val": 1, "test": 1}
    assert dataset["images"] == 5
    assert dataset["sources"] == ["synthetic"]

    checkpoint = cmd_info(_cfg(), plain_checkpoint)["checkpoint"]
    assert checkpoint["variant"] == "plain"
    assert checkpoint["step"] == 2
    model = load_checkpoint(plain_checkpoint).model
    assert checkpoint["parameters"] == model.parameter_count


def test_main_info_prints_json(
    plain_checkpoint: Path, capsys: pytest.CaptureFixture
) -> None:
    assert main(["info", str(plain_checkpoint)]) == 0
    payload = orjson.loads(capsys.readouterr().out)
    assert payload["checkpoint"]["format"] == "wavedeband-checkpoint"


def test_fuse_external(tmp_path: Path) -> None:
    banded = _input_image(tmp_path / "banded.png", 30, 40)
    save_image(banded, tmp_path / "same.png")
    fused, mask = fuse_external(tmp_path / "banded.png", tmp_path / "same.png")
    assert fused.shape == (3, 30, 40)
    assert mask.shape == (1, 30, 40)
    assert torch.equal(fused, banded)

    smooth = torch.full((3, 30, 40), 0.5)
    save_image(smooth, tmp_path / "smooth.png")
    fused, mask = fuse_external(tmp_path / "banded.png", tmp_path / "smooth.png")
    smooth = load_image(tmp_path / "smooth.png")
    expected = banded * mask + smooth * (1 - mask)
    assert torch.allclose(fused, expected, atol=1e-6)

    save_image(torch.rand(3, 8, 8), tmp_path / "small.png")
    with pytest.raises(ArgumentError):
        fuse_external(tmp_path / "banded.png", tmp_path / "small.png")


def test_cmd_fuse_writes_outputs(tmp_path: Path) -> None:
    _input_image(tmp_path / "banded.png", 32, 32)
    save_image(torch.full((3, 32, 32), 0.4), tmp_path / "other.png")
    target = cmd_fuse(
        _cfg(), tmp_path / "banded.png", tmp_path / "other.png", tmp_path / "out"
    )
    assert target.name == "banded_fused.png"
    assert (tmp_path / "out" / "banded_mask.png").is_file()
    assert (tmp_path / "out" / CONFIG_ECHO_NAME).is_file()
