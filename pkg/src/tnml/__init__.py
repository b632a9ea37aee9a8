"""Tensor-network classifiers with copy-node initialization and trainable bond dimensions."""

from tnml.errors import (
    DimensionError,
    DivergenceError,
    FormatError,
    InvalidSelectionError,
    RangeError,
    StructuralError,
    TNError,
)
from tnml.tensor import (
    Tensor,
    contract,
    diag_tensor,
    make_copy_node,
    outer,
    permute,
    relabel,
)

__version__ = "0.1.0"

__all__ = [
    "DimensionError",
    "DivergenceError",
    "FormatError",
    "InvalidSelectionError",
    "RangeError",
    "StructuralError",
    "TNError",
    "Tensor",
    "contract",
    "diag_tensor",
    "make_copy_node",
    "outer",
    "permute",
    "relabel",
]
