"""Hybrid CPU-GPU attention for long-context decoding, simulated at desk scale."""

from .costmodel import AoC, AoG, Hybrid, PlatformParams, Workload, estimate_latency, estimate_pruned
from .engine import DecodeTrace, Engine, EngineConfig, accuracy_proxy, run_decode
from .errors import (CapacityError, ConfigError, ConsistencyError, CoverageError,
                     HybridAttnError, InputError, OverlapError, ShapeError)
from .model import ModelConfig, decode_step_exact, init_model, prefill

__all__ = [
    "AoC", "AoG", "Hybrid", "PlatformParams", "Workload", "estimate_latency", "estimate_pruned",
    "DecodeTrace", "Engine", "EngineConfig", "accuracy_proxy", "run_decode",
    "CapacityError", "ConfigError", "ConsistencyError", "CoverageError", "HybridAttnError",
    "InputError", "OverlapError", "ShapeError",
    "ModelConfig", "decode_step_exact", "init_model", "prefill",
]
__version__ = "0.1.0"
