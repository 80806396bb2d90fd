"""Energy-based normalizing flows."""

from ebflow.flow import EnergyReport, FlowModel

__version__ = "0.1.0"

__all__ = ["EnergyReport", "FlowModel", "__version__"]
