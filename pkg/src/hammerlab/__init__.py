"""Desk-scale RowHammer vulnerability profiling and bit-flip-attack harness."""

from .classifier import Scheme, SecurityLevelMap, classify, level_counts, recommend_defense
from .commands import DDR4_2400, CommandTrace, TimingParams, execute, hammer_budget, validate_trace
from .device import BehaviorClass, DeviceConfig, VendorProfile, builtin_profiles, flips_for, new_device
from .patterns import AttackModel, PatternSpec, build_program, detect_bitflips
from .profiler import SweepPlan, calibrate, flip_curve, persistence_map, run_sweep, stability

__version__ = "0.1.0"

__all__ = [
    "Scheme",
    "SecurityLevelMap",
    "classify",
    "level_counts",
    "recommend_defense",
    "DDR4_2400",
    "CommandTrace",
    "TimingParams",
    "execute",
    "hammer_budget",
    "validate_trace",
    "BehaviorClass",
    "DeviceConfig",
    "VendorProfile",
    "builtin_profiles",
    "flips_for",
    "new_device",
    "AttackModel",
    "PatternSpec",
    "build_program",
    "detect_bitflips",
    "SweepPlan",
    "calibrate",
    "flip_curve",
    "persistence_map",
    "run_sweep",
    "stability",
]
