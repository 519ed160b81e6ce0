"""Semi-batch alpha-lactose monohydrate crystallizer: moment model, optimal control,
maximum-entropy seed reconstruction and full population-balance validation."""

from lactocryst.kinetics import KineticParams
from lactocryst.model import PhysicalConstants, ProcessState, ControlInput
from lactocryst.policies import ControlProfile

__all__ = [
    "KineticParams",
    "PhysicalConstants",
    "ProcessState",
    "ControlInput",
    "ControlProfile",
]

__version__ = "0.1.0"
