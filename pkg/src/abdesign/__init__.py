"""Adaptive treatment allocation for sequential A/B experiments with carryover."""
from .core import (AbDesignError, CapabilityError, ConfigError, DomainError, EpisodeRecord,
                   ExperimentLog, HorizonExceeded, InsufficientData, ObservationSpace, StateError,
                   make_rng, run_episode)

__version__ = "0.1.0"

__all__ = [
    "AbDesignError", "CapabilityError", "ConfigError", "DomainError", "EpisodeRecord",
    "ExperimentLog", "HorizonExceeded", "InsufficientData", "ObservationSpace", "StateError",
    "make_rng", "run_episode",
]
