"""Desk-scale simulation and control stack for robotic fiberoptic intubation."""

from .airway import AirwayGeometry, Scenario, build_airway
from .config import StackConfig
from .model import LatentDynamicsModel
from .plant import BackboneCloud, ContactEvent, Plant, PlantState, add_sensor_noise

__version__ = "0.1.0"

__all__ = [
    "AirwayGeometry",
    "BackboneCloud",
    "ContactEvent",
    "LatentDynamicsModel",
    "Plant",
    "PlantState",
    "Scenario",
    "StackConfig",
    "add_sensor_noise",
    "build_airway",
    "__version__",
]
