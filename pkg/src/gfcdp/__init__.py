"""Dynamic-phasor simulation and small-signal analysis of a grid-forming
converter connected through a transformer and a series-compensated line to
an infinite bus."""

from .parameters import (
    FaultSpec,
    GfcParams,
    NetworkParams,
    Scenario,
    SystemParams,
)

__all__ = [
    "FaultSpec",
    "GfcParams",
    "NetworkParams",
    "Scenario",
    "SystemParams",
]

__version__ = "0.1.0"
