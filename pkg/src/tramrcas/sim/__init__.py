"""Multi-tram scenario simulation."""
from .config import (
    DriverConfig,
    ScenarioConfig,
    ScenarioError,
    SensorConfig,
    SlipEvent,
    TramConfig,
    approach_scenario,
    load_scenario,
    scenario_from_dict,
)
from .driver import DriverModel, driver_model
from .engine import SimLog, SimulationFailure, run_scenario
from .sensors import TruthSample, synthesize_sensors

__all__ = [
    "DriverConfig",
    "DriverModel",
    "ScenarioConfig",
    "ScenarioError",
    "SensorConfig",
    "SimLog",
    "SimulationFailure",
    "SlipEvent",
    "TramConfig",
    "TruthSample",
    "approach_scenario",
    "driver_model",
    "load_scenario",
    "run_scenario",
    "scenario_from_dict",
    "synthesize_sensors",
]
