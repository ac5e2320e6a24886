"""Cross-transformer few-shot detector: C++ core with numpy bindings."""

from ._fct import (
    ConfigError,
    DataError,
    Dataset,
    Detector,
    IoError,
    NumericError,
    PointOutsideError,
    ShapeError,
    attention_masks,
    average_precision,
    default_config,
    finetune,
    generate_corpora,
    iou,
    nms,
    normalize_config,
    pretrain,
    roi_align,
    train_base,
)

__all__ = [
    "ConfigError",
    "DataError",
    "Dataset",
    "Detector",
    "IoError",
    "NumericError",
    "PointOutsideError",
    "ShapeError",
    "attention_masks",
    "average_precision",
    "default_config",
    "finetune",
    "generate_corpora",
    "iou",
    "nms",
    "normalize_config",
    "pretrain",
    "roi_align",
    "train_base",
]
