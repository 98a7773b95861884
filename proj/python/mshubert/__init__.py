"""Two-view masked speech pre-training at desk scale."""

from ._core import (
    ContractError,
    DimensionError,
    Error,
    FormatError,
    InsufficientDataError,
    NumericError,
    ValidationError,
    assignment,
    cca,
    config_keys,
    config_text,
    count_parameters,
    label_disagreement,
    layer_auc,
    layer_schedule,
    one_hot,
    parameter_table,
    pwcca,
    read_label_file,
    run_cli,
    swap_views,
    validate_report,
)

__all__ = [name for name in dir() if not name.startswith("_")]
