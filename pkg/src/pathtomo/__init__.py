"""Local-oscillator tomography of single-photon path-entangled states."""

from .fock import (
    DensityOperator,
    FockSpace,
    ModeOperator,
    StateVector,
    apply_loss,
    beamsplitter_unitary,
    coherent_state,
    partial_trace,
    tensor,
)
from .states import StructuredState, WStateSpec, assemble, extract_structure, make_w_state

__version__ = "0.1.0"

__all__ = [
    "DensityOperator",
    "FockSpace",
    "ModeOperator",
    "StateVector",
    "StructuredState",
    "WStateSpec",
    "apply_loss",
    "assemble",
    "beamsplitter_unitary",
    "coherent_state",
    "extract_structure",
    "make_w_state",
    "partial_trace",
    "tensor",
]
