"""Python surface of the crack segmentation pipeline."""

import torch as _torch  # noqa: F401  (loads libtorch before the extension)

try:
    from . import _core
except ImportError:  # development tree: extension sits on sys.path
    import _core

DataError = _core.DataError
UsageError = _core.UsageError
build_dataset_stats = _core.build_dataset_stats
clean_mask = _core.clean_mask
confusion_metrics = _core.confusion_metrics
generate_scene = _core.generate_scene
pad_index_map = _core.pad_index_map
seg_loss = _core.seg_loss
swin_param_count = _core.swin_param_count
temporal_consistency = _core.temporal_consistency
unet_param_count = _core.unet_param_count
write_scene = _core.write_scene

__all__ = [
    "DataError",
    "UsageError",
    "build_dataset_stats",
    "clean_mask",
    "confusion_metrics",
    "generate_scene",
    "pad_index_map",
    "seg_loss",
    "swin_param_count",
    "temporal_consistency",
    "unet_param_count",
    "write_scene",
]
