"""Python access to the udaliver C++ core."""

import torch  # noqa: F401  (loads libtorch before the extension)

from ._udaliver import (  # noqa: F401
    ConfigError,
    DimensionError,
    IoError,
    NumericError,
    ValidationError,
    compute_metrics,
    default_config,
    dice_loss,
    entropy_loss,
    generate_synthetic,
    low_signal_augment,
    mean_completer,
    pamr_refine,
    parse_config,
    variant_names,
    weighted_self_information,
)

__version__ = "0.1.0"
