"""cnnexport: dump CNN activations in the rule pipeline's file formats."""

from .ebp import EbpParams, ebp_finetune, elite_kernels, selective_kernel_count
from .errors import ConfigError, ExporterError
from .export import (
    ActivationTap,
    ExportSpec,
    export_activations,
    export_split,
    find_layer,
    load_image,
    load_model,
)
from .formats import write_feature_map, write_mask_csv, write_norms_csv

__version__ = "0.1.0"
