"""Main entrypoint into package.

This is the ONLY public interface into the package. All other modules are
to be considered private and subject to change without notice.
"""

from wavedeband._errors import (
    ArgumentError,
    CheckpointError,
    ConfigError,
    DataIOError,
    DimensionError,
    EvaluationError,
    RefusedError,
    TrainingFault,
    UnsupportedFormatError,
    WaveDebandError,
)
from wavedeband.banddata import (
    ImagePair,
    PatchDataset,
    extract_patches,
    gen_gradient_corpus,
    load_image,
    make_dataset,
    pad_to_multiple,
    patch_grid,
    read_dataset,
    save_image,
    synth_band,
    write_dataset,
)
from wavedeband.freqmask import (
    dwt_mask,
    fuse,
    map_mask,
    minmax_normalize,
    to_grayscale,
    upsample,
    wwm_mask,
)
from wavedeband.metrics import (
    EvaluationTriple,
    band_edge_index,
    evaluate,
    external_metric_hook,
    merge_reports,
    psnr,
    ssim,
    write_report,
)
from wavedeband.network import (
    HighFrequencyBlock,
    LowFrequencyBlock,
    RestorationOutput,
    SelectiveKernelFusion,
    WaveMamba,
    restore,
    selective_scan,
)
from wavedeband.runner import (
    cmd_eval,
    cmd_fuse,
    cmd_info,
    cmd_infer,
    cmd_synth,
    cmd_train,
    fuse_external,
    resolve_config,
)
from wavedeband.schema import (
    DataConfig,
    EvalConfig,
    MetricReport,
    NetConfig,
    RunConfig,
    Split,
    TrainConfig,
    TrainLog,
    Variant,
)
from wavedeband.serialization import save_checkpoint
from wavedeband.trainer import l1_loss, load_checkpoint, train
from wavedeband.version import __version__
from wavedeband.wavelet import (
    WaveletLevel,
    WaveletPyramid,
    decompose,
    dwt2,
    idwt2,
    reconstruct,
)

__all__ = [
    "ArgumentError",
    "CheckpointError",
    "ConfigError",
    "DataConfig",
    "DataIOError",
    "DimensionError",
    "EvalConfig",
    "EvaluationError",
    "EvaluationTriple",
    "HighFrequencyBlock",
    "ImagePair",
    "LowFrequencyBlock",
    "MetricReport",
    "NetConfig",
    "PatchDataset",
    "RefusedError",
    "RestorationOutput",
    "RunConfig",
    "SelectiveKernelFusion",
    "Split",
    "TrainConfig",
    "TrainLog",
    "TrainingFault",
    "UnsupportedFormatError",
    "Variant",
    "WaveDebandError",
    "WaveMamba",
    "WaveletLevel",
    "WaveletPyramid",
    "__version__",
    "band_edge_index",
    "cmd_eval",
    "cmd_fuse",
    "cmd_info",
    "cmd_infer",
    "cmd_synth",
    "cmd_train",
    "decompose",
    "dwt2",
    "dwt_mask",
    "evaluate",
    "external_metric_hook",
    "extract_patches",
    "fuse",
    "fuse_external",
    "gen_gradient_corpus",
    "idwt2",
    "l1_loss",
    "load_checkpoint",
    "load_image",
    "make_dataset",
    "map_mask",
    "merge_reports",
    "minmax_normalize",
    "pad_to_multiple",
    "patch_grid",
    "psnr",
    "read_dataset",
    "reconstruct",
    "resolve_config",
    "restore",
    "save_checkpoint",
    "save_image",
    "selective_scan",
    "ssim",
    "synth_band",
    "to_grayscale",
    "train",
    "upsample",
    "write_dataset",
    "write_report",
    "wwm_mask",
]
