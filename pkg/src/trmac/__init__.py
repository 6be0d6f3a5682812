"""Slotted simulator of a time-reversal MAC for wireless networks-on-chip."""

from .channel import CirMatrix, CirParams, TrFilterBank, build_tr_filter_bank, synthesize_cir
from .config import load_config
from .engine import SimConfig, SimResult, Simulation, run_simulation, run_sweep, tone_energy_overhead
from .metrics import MetricsSummary, summarize
from .phy import PhyProfile, compute_npt, compute_thresholds, derive_profile
from .protocols import BackoffParams, Packet, TimingPlan
from .traffic import TrafficConfig, TrafficGenerator

__version__ = "0.1.0"

__all__ = [
    "BackoffParams",
    "CirMatrix",
    "CirParams",
    "MetricsSummary",
    "Packet",
    "PhyProfile",
    "SimConfig",
    "SimResult",
    "Simulation",
    "TimingPlan",
    "TrFilterBank",
    "TrafficConfig",
    "TrafficGenerator",
    "build_tr_filter_bank",
    "compute_npt",
    "compute_thresholds",
    "derive_profile",
    "load_config",
    "run_simulation",
    "run_sweep",
    "summarize",
    "synthesize_cir",
    "tone_energy_overhead",
]
