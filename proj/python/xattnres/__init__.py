"""Cross-stage attention residuals for a small U-Net."""

from ._xattnres import (
    ConfigError,
    ContractError,
    DataError,
    Model,
    ShapeError,
    config_keys,
    config_text,
    dice,
    gradcheck,
    hd95,
    iou,
    parameter_count,
    run,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "Model",
    "ShapeError",
    "config_keys",
    "config_text",
    "dice",
    "gradcheck",
    "hd95",
    "iou",
    "parameter_count",
    "run",
]
