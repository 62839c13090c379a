"""Image quality metrics and comparative reports.

``psnr`` and ``ssim`` follow their standard definitions. ``band_edge_index``
(BEI) is a proxy banding score: the fraction of pixels sitting on an isolated
small step between two flat runs, which is what a false contour looks like
after coarse quantization.

A report has one row per (image, variant) with the restored image's PSNR and
SSIM against the pristine one, the BEI of the banded input and of the
restoration, and the deltas (restored minus banded). Optional columns come
from external commands, see ``external_metric_hook``.
"""

import logging
import math
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import ValidationError

from wavedeband._errors import (
    ArgumentError,
    DataIOError,
    DimensionError,
    EvaluationError,
    WaveDebandError,
)
from wavedeband.banddata import save_image
from wavedeband.freqmask import to_grayscale
from wavedeband.schema import (
    NUMERIC_COLUMNS,
    REPORT_COLUMNS,
    ColumnStats,
    MetricReport,
    ReportRow,
    VariantSummary,
)
from wavedeband.serialization import log_warning_once, write_json

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# Band-edge thresholds, in units of the [0, 1] intensity range.
BEI_STEP = 1.0 / 255.0
BEI_FLAT = 1.0 / 510.0
BEI_FLANK = 3
# Gradients of exact 8-bit ramps land a few ulps below 1/255 after luma mixing.
_BEI_SLACK = 1e-6

BASELINE_VARIANT = "banded"

PathLike = Union[str, Path]


@dataclass
class EvaluationTriple:
    """One evaluated image: ``(3, H, W)`` tensors plus the mask used, if any."""

    image_id: str
    pristine: torch.Tensor
    banded: torch.Tensor
    restored: torch.Tensor
    mask: Optional[torch.Tensor] = None


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(
            f"Expected matching shapes, got {tuple(a.shape)} and {tuple(b.shape)}"
        )


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB for values in [0, 1], capped at 100."""
    _check_same_shape(a, b)
    mse = float((a.double() - b.double()).pow(2).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(dtype: torch.dtype) -> torch.Tensor:
    coords = torch.arange(SSIM_WINDOW, dtype=dtype) - (SSIM_WINDOW - 1) / 2
    profile = torch.exp(-(coords**2) / (2 * SSIM_SIGMA**2))
    profile = profile / profile.sum()
    return torch.outer(profile, profile)


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean structural similarity over all valid 11x11 window positions.

    Computed per channel and averaged; accepts ``(C, H, W)`` or
    ``(N, C, H, W)`` tensors with values in [0, 1].
    """
    _check_same_shape(a, b)
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    if a.dim() != 4:
        raise DimensionError(f"Expected (N, C, H, W) images, got {tuple(a.shape)}")
    height, width = a.shape[-2:]
    if min(height, width) < SSIM_WINDOW:
        raise ArgumentError(
            f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got "
            f"{height}x{width}"
        )
    a, b = a.double(), b.double()
    channels = a.shape[1]
    window = _gaussian_window(torch.float64).expand(channels, 1, -1, -1)

    def local_mean(x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, window, groups=channels)

    mu_a, mu_b = local_mean(a), local_mean(b)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = local_mean(a * a) - mu_aa
    var_b = local_mean(b * b) - mu_bb
    cov = local_mean(a * b) - mu_ab
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    numerator = (2 * mu_ab + c1) * (2 * cov + c2)
    denominator = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return float((numerator / denominator).mean().clamp(-1.0, 1.0))


def _luma64(img: torch.Tensor) -> torch.Tensor:
    img = img.double()
    if img.dim() == 2:
        return img
    if img.shape[-3] == 3:
        return to_grayscale(img).squeeze(-3)
    if img.shape[-3] == 1:
        return img.squeeze(-3)
    raise DimensionError(f"Expected 1 or 3 channels, got {tuple(img.shape)}")


def _band_edges_along_width(luma: torch.Tensor) -> torch.Tensor:
    width = luma.shape[-1]
    edges = torch.zeros(luma.shape, dtype=torch.bool)
    if width < 2 * BEI_FLANK + 2:
        return edges
    # grad[..., j] is the step from pixel j to pixel j + 1.
    grad = luma.diff(dim=-1).abs()
    flank = grad.unfold(-1, BEI_FLANK, 1).mean(dim=-1)
    center = grad[..., BEI_FLANK : width - BEI_FLANK - 1]
    left = flank[..., : width - 2 * BEI_FLANK - 1]
    right = flank[..., BEI_FLANK + 1 : width - BEI_FLANK]
    edges[..., BEI_FLANK + 1 : width - BEI_FLANK] = (
        (center >= BEI_STEP - _BEI_SLACK) & (left < BEI_FLAT) & (right < BEI_FLAT)
    )
    return edges


def band_edge_index(img: torch.Tensor) -> float:
    """Fraction of pixels that are band edges along either axis.

    A pixel is a band edge along an axis when the luma step into it is at
    least 1/255 while the mean absolute step over the 3 gradients on each
    side is below 1/510. Accepts ``(H, W)``, ``(C, H, W)`` or ``(N, C, H, W)``.
    """
    luma = _luma64(img)
    across = _band_edges_along_width(luma)
    down = _band_edges_along_width(luma.transpose(-1, -2)).transpose(-1, -2)
    return float((across | down).double().mean())


def external_metric_hook(
    command_template: str,
    triples: Sequence[EvaluationTriple],
    *,
    timeout: float = 60.0,
    name: str = "external",
) -> List[Optional[float]]:
    """Run an external command once per triple and parse one number from it.

    The template may reference ``{pristine}``, ``{banded}`` and ``{restored}``,
    which are replaced by paths to temporary 8-bit PNG files. The last
    non-empty line of standard output is parsed as a float. Any failure marks
    that row's value absent and logs a warning; it never raises.
    """
    values: List[Optional[float]] = []
    with tempfile.TemporaryDirectory(prefix="wavedeband-metric-") as tmp:
        for index, triple in enumerate(triples):
            paths = {}
            for role in ("pristine", "banded", "restored"):
                path = Path(tmp) / f"{index:05d}_{role}.png"
                save_image(getattr(triple, role), path)
                paths[role] = shlex.quote(str(path))
            try:
                argv = shlex.split(command_template.format(**paths))
            except (KeyError, IndexError, ValueError) as e:
                log_warning_once(
                    f"External metric {name!r} has an invalid template "
                    f"{command_template!r}: {e}; column marked absent"
                )
                return [None] * len(triples)
            values.append(_run_metric_command(argv, name, triple.image_id, timeout))
    return values


def _run_metric_command(
    argv: List[str], name: str, image_id: str, timeout: float
) -> Optional[float]:
    try:
        completed = subprocess.run(
            argv, capture_output=True, text=True, timeout=timeout, check=False
        )
    except (OSError, ValueError, subprocess.TimeoutExpired) as e:
        log_warning_once(f"External metric {name!r} could not run: {e}")
        return None
    if completed.returncode != 0:
        log_warning_once(
            f"External metric {name!r} exited with status {completed.returncode}; "
            f"column marked absent"
        )
        return None
    lines = [line for line in completed.stdout.splitlines() if line.strip()]
    try:
        value = float(lines[-1])
    except (IndexError, ValueError):
        logger.warning(
            "External metric %r printed no number for %s; value marked absent",
            name,
            image_id,
        )
        return None
    return value if math.isfinite(value) else None


def _evaluate_row(triple: EvaluationTriple, variant: str) -> ReportRow:
    _check_same_shape(triple.pristine, triple.banded)
    _check_same_shape(triple.pristine, triple.restored)
    psnr_banded = psnr(triple.banded, triple.pristine)
    psnr_restored = psnr(triple.restored, triple.pristine)
    bei_banded = band_edge_index(triple.banded)
    bei_restored = band_edge_index(triple.restored)
    return ReportRow(
        image_id=triple.image_id,
        variant=variant,
        psnr_db=psnr_restored,
        ssim=ssim(triple.restored, triple.pristine),
        bei_banded=bei_banded,
        bei_restored=bei_restored,
        delta_psnr=psnr_restored - psnr_banded,
        delta_bei=bei_restored - bei_banded,
        mask_mean=None if triple.mask is None else float(triple.mask.mean()),
    )


def _column_stats(values: Sequence[float]) -> ColumnStats:
    array = np.asarray(values, dtype=np.float64)
    return ColumnStats(mean=float(array.mean()), stddev=float(array.std()))


def summarize(
    rows: Sequence[ReportRow], variant: str, extra_columns: Sequence[str] = ()
) -> VariantSummary:
    """Mean and population standard deviation of every numeric column.

    Absent external values are left out of their column's statistics; a
    column with no values at all is left out of the summary.
    """
    columns: Dict[str, ColumnStats] = {
        column: _column_stats([getattr(row, column) for row in rows])
        for column in NUMERIC_COLUMNS
    }
    mask_means = [row.mask_mean for row in rows if row.mask_mean is not None]
    if mask_means:
        columns["mask_mean"] = _column_stats(mask_means)
    for column in extra_columns:
        present = [
            value
            for value in (row.extra.get(column) for row in rows)
            if value is not None
        ]
        if present:
            columns[column] = _column_stats(present)
    return VariantSummary(variant=variant, count=len(rows), columns=columns)


def evaluate(
    triples: Sequence[EvaluationTriple],
    variant: str,
    *,
    external_metrics: Optional[Mapping[str, str]] = None,
    external_timeout: float = 60.0,
) -> MetricReport:
    """Score every triple for one variant and aggregate.

    Rows that fail (mismatched shapes, out-of-range values) are skipped and
    listed in ``MetricReport.skipped``; if none survive EvaluationError is
    raised.
    """
    if not triples:
        raise EvaluationError(f"Nothing to evaluate for variant {variant!r}")
    rows: List[ReportRow] = []
    kept: List[EvaluationTriple] = []
    skipped: List[str] = []
    for triple in triples:
        try:
            rows.append(_evaluate_row(triple, variant))
        except (WaveDebandError, ValidationError) as e:
            logger.warning("Skipping %s (%s): %s", triple.image_id, variant, e)
            skipped.append(f"{triple.image_id}: {e}")
            continue
        kept.append(triple)
    if not rows:
        raise EvaluationError(
            f"All {len(triples)} rows failed for variant {variant!r}; "
            f"first error: {skipped[0]}"
        )

    extra_columns = sorted(external_metrics or {})
    for column in extra_columns:
        values = external_metric_hook(
            external_metrics[column],  # type: ignore[index]
            kept,
            timeout=external_timeout,
            name=column,
        )
        for row, value in zip(rows, values):
            row.extra[column] = value

    return MetricReport(
        rows=rows,
        summaries=[summarize(rows, variant, extra_columns)],
        skipped=skipped,
        extra_columns=extra_columns,
    )


def merge_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Concatenate per-variant reports, preserving their order."""
    extra_columns: List[str] = []
    for report in reports:
        extra_columns.extend(c for c in report.extra_columns if c not in extra_columns)
    return MetricReport(
        rows=[row for report in reports for row in report.rows],
        summaries=[summary for report in reports for summary in report.summaries],
        skipped=[item for report in reports for item in report.skipped],
        extra_columns=extra_columns,
    )


def _format_cell(value: Union[str, float, None]) -> str:
    if value is None:
        return "NA"
    if isinstance(value, str):
        return value
    return f"{value:.6f}"


def report_table(report: MetricReport) -> str:
    """Tab-separated report: header, then one row per (image, variant)."""
    header = [*REPORT_COLUMNS, *report.extra_columns]
    lines = ["\t".join(header)]
    for row in report.rows:
        cells = [getattr(row, column) for column in REPORT_COLUMNS]
        cells.extend(row.extra.get(column) for column in report.extra_columns)
        lines.append("\t".join(_format_cell(cell) for cell in cells))
    return "\n".join(lines) + "\n"


def write_report(report: MetricReport, out_dir: PathLike) -> None:
    """Write ``report.tsv`` and ``summary.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.tsv").write_text(report_table(report), encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"Could not write report into {out_dir}: {e}") from e
    write_json(
        {
            "extra_columns": report.extra_columns,
            "row_count": len(report.rows),
            "skipped": report.skipped,
            "summaries": report.summaries,
        },
        out_dir / "summary.json",
    )
