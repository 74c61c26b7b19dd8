"""Desk-scale laboratory for dataset-level versus task-level class imbalance
in few-shot learning."""

from .errors import CapacityError, ContractError, DimensionError, ImbfslError, InputError, NumericError, ParseError
from .imbalance import ImbalanceSpec, imbalance_ratio, parse_spec, profile

__version__ = "0.1.0"

__all__ = ["ImbalanceSpec", "profile", "parse_spec", "imbalance_ratio", "ImbfslError", "InputError",
           "ParseError", "CapacityError", "DimensionError", "ContractError", "NumericError", "__version__"]
