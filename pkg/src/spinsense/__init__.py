"""Optical link, timing-based relative sensing and global localization for spinning drones."""

from .geometry import ReceiverId, RobotGeometry, SpinState, TxKind, default_geometry
from .localization import FacingObservation, PositionEstimate, SolverConfig, solve_xy, solve_z
from .protocol import Packet, decode_pulse_train, encode_packet
from .sensing import CalibrationTable, TimingRecord, ideal_relative
from .simengine import ScenarioConfig, load_scenario, run_scenario, shipped_scenario

__version__ = "0.1.0"

__all__ = [
    "CalibrationTable", "FacingObservation", "Packet", "PositionEstimate", "ReceiverId", "RobotGeometry",
    "ScenarioConfig", "SolverConfig", "SpinState", "TimingRecord", "TxKind", "decode_pulse_train",
    "default_geometry", "encode_packet", "ideal_relative", "load_scenario", "run_scenario",
    "shipped_scenario", "solve_xy", "solve_z",
]
