"""Sparse-encode / complete / dense-decode volumetric segmentation on a small numpy autodiff engine."""

from .config import ModelConfig, kept_count, parse_config, token_chain
from .model import SCDModel
from .profiling import count_macs, export_depth_map, measure_throughput
from .stp import apply_stp, soft_topk_mask
from .mta import assemble

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "SCDModel", "apply_stp", "assemble", "count_macs", "export_depth_map",
    "kept_count", "measure_throughput", "parse_config", "soft_topk_mask", "token_chain",
]
