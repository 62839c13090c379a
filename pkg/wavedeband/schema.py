"""Configuration and record models.

Everything that crosses a file boundary (configuration, dataset manifest,
training log, metric report) is a pydantic model defined here, so that reading
an artifact back goes through the same validation that produced it.
"""

import math
from enum import Enum
from pathlib import Path
from typing import Annotated, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, RootModel, model_validator


class Variant(str, Enum):
    """Which frequency-masking strategy the network is run with."""

    PLAIN = "plain"
    WWM = "wwm"
    DWT = "dwt"
    MAP = "map"

    @property
    def is_fused_in_forward(self) -> bool:
        """True for the variants whose mask lives inside the forward pass."""
        return self in (Variant.DWT, Variant.MAP)


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class NetConfig(BaseModel):
    """Hyperparameters of the restoration network."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    base_channels: int = Field(16, ge=4, description="Feature width C.")
    depth: int = Field(3, ge=1, description="Number of wavelet levels L.")
    state_dim: int = Field(16, ge=1, description="Hidden size of the state scan.")
    ffn_expansion: float = Field(2.0, gt=0, description="Feed-forward width ratio.")
    attention_heads: int = Field(2, ge=1)
    variant: Variant = Variant.PLAIN

    @model_validator(mode="after")
    def _check_widths(self) -> "NetConfig":
        if self.base_channels % self.attention_heads:
            raise ValueError(
                f"attention_heads must divide base_channels, got "
                f"base_channels={self.base_channels} and "
                f"attention_heads={self.attention_heads}"
            )
        if self.hidden_channels < 1:
            raise ValueError(
                f"ffn_expansion={self.ffn_expansion} leaves no hidden channels "
                f"for base_channels={self.base_channels}"
            )
        return self

    @property
    def hidden_channels(self) -> int:
        return int(self.base_channels * self.ffn_expansion)

    @property
    def dt_rank(self) -> int:
        """Rank of the step-size projection inside the selective scan."""
        return max(1, math.ceil(self.base_channels / 16))

    @property
    def multiple(self) -> int:
        """Image sides must be divisible by this number."""
        return 2**self.depth


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    steps: int = Field(1_000, ge=1)
    batch: int = Field(8, ge=1)
    learning_rate: float = Field(2e-4, gt=0)
    seed: int = 0
    variant: Variant = Variant.PLAIN
    eval_every: int = Field(100, ge=1)
    eval_limit: int = Field(
        64, ge=1, description="Validation pairs scored at each evaluation."
    )
    log_every: int = Field(10, ge=1)
    checkpoint_path: Optional[Path] = None


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    corpus_size: int = Field(60, ge=1)
    image_size: int = Field(256, ge=32)
    bits: List[Annotated[int, Field(ge=2, le=8)]] = Field(
        default_factory=lambda: [3, 4, 5], min_length=1
    )
    patch: int = Field(64, ge=1)
    stride: int = Field(32, ge=1)
    dither: bool = False
    format: Literal["npy", "png"] = "npy"

    @model_validator(mode="after")
    def _check_sizes(self) -> "DataConfig":
        size = self.image_size
        if size & (size - 1):
            raise ValueError(f"image_size must be a power of two, got {size}")
        if self.patch > size:
            raise ValueError(
                f"patch={self.patch} does not fit in image_size={size}"
            )
        return self


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    split: Union[Split, Literal["all"]] = Split.TEST
    batch: int = Field(8, ge=1)
    external_metrics: Dict[str, str] = Field(
        default_factory=dict,
        description=(
            "Column name -> command template. Templates may reference "
            "{pristine}, {banded} and {restored}."
        ),
    )
    external_timeout: float = Field(60.0, gt=0)


class RunConfig(BaseModel):
    """Everything one command invocation needs, resolved from file and flags."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = 0
    net: NetConfig = Field(default_factory=NetConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def _propagate_seed(self) -> "RunConfig":
        # The run seed reaches the trainer unless the trainer's seed was set.
        if "seed" not in self.train.model_fields_set and self.train.seed != self.seed:
            object.__setattr__(
                self, "train", self.train.model_copy(update={"seed": self.seed})
            )
        return self


# Dataset manifest


class ManifestRecord(BaseModel):
    """One line of ``manifest.jsonl``: a single (pristine, banded) pair."""

    model_config = ConfigDict(extra="forbid")

    id: str
    split: Split
    source: Literal["synthetic", "imported"]
    image_id: str
    bits: Optional[int] = None
    top: int = 0
    left: int = 0
    pristine: str
    banded: str


# Training log


class StepRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["step"] = "step"
    step: int
    loss: float


class EvalRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["eval"] = "eval"
    step: int
    psnr: float
    ssim: float
    bei: float
    mask_mean: Optional[float] = None
    mask_high_fraction: Optional[float] = Field(
        None, description="Fraction of mask values above 0.5."
    )


TrainLogRecord = RootModel[
    Annotated[Union[StepRecord, EvalRecord], Field(discriminator="kind")]
]


class TrainLog(BaseModel):
    losses: List[float] = Field(default_factory=list)
    evals: List[EvalRecord] = Field(default_factory=list)
    wall_clock: float = 0.0
    """Seconds spent in train(). Kept out of the exported log file."""

    def records(self) -> List[Union[StepRecord, EvalRecord]]:
        """Interleave step and eval records in step order."""
        out: List[Union[StepRecord, EvalRecord]] = []
        evals = iter(self.evals)
        pending = next(evals, None)
        for index, loss in enumerate(self.losses, start=1):
            out.append(StepRecord(step=index, loss=loss))
            while pending is not None and pending.step == index:
                out.append(pending)
                pending = next(evals, None)
        return out


# Metric report

REPORT_COLUMNS = (
    "image_id",
    "variant",
    "psnr_db",
    "ssim",
    "bei_banded",
    "bei_restored",
    "delta_psnr",
    "delta_bei",
)

NUMERIC_COLUMNS = (
    "psnr_db",
    "ssim",
    "bei_banded",
    "bei_restored",
    "delta_psnr",
    "delta_bei",
)


class ReportRow(BaseModel):
    image_id: str
    variant: str
    psnr_db: float = Field(..., ge=0, le=100)
    ssim: float = Field(..., ge=-1, le=1)
    bei_banded: float = Field(..., ge=0, le=1)
    bei_restored: float = Field(..., ge=0, le=1)
    delta_psnr: float
    delta_bei: float
    mask_mean: Optional[float] = None
    extra: Dict[str, Optional[float]] = Field(default_factory=dict)


class ColumnStats(BaseModel):
    mean: float
    stddev: float


class VariantSummary(BaseModel):
    variant: str
    count: int
    columns: Dict[str, ColumnStats]


class MetricReport(BaseModel):
    rows: List[ReportRow] = Field(default_factory=list)
    summaries: List[VariantSummary] = Field(default_factory=list)
    skipped: List[str] = Field(
        default_factory=list, description="Row errors as '<image_id>: <reason>'."
    )
    extra_columns: List[str] = Field(default_factory=list)
