"""Event-driven simulator and analytics for dynamic matching markets."""

from .core import (
    Agent,
    AgentOutcome,
    ConfigError,
    Constant,
    DepartureSpec,
    DomainError,
    Exponential,
    FormatError,
    MarketConfig,
    Mixture,
    NeverPerish,
    NumericError,
    PairCompatibilityOracle,
    PolicyKind,
    RangeError,
    RngStreams,
    Uniform,
    departure_cdf,
    mix_seed,
    sample_interarrival,
    sample_sojourn,
)
from .engine import RunStats, instrument_patient_k1, pool_integral, run, run_coupled

__version__ = "0.1.0"

__all__ = [
    "Agent",
    "AgentOutcome",
    "ConfigError",
    "Constant",
    "DepartureSpec",
    "DomainError",
    "Exponential",
    "FormatError",
    "MarketConfig",
    "Mixture",
    "NeverPerish",
    "NumericError",
    "PairCompatibilityOracle",
    "PolicyKind",
    "RangeError",
    "RngStreams",
    "RunStats",
    "Uniform",
    "departure_cdf",
    "instrument_patient_k1",
    "mix_seed",
    "pool_integral",
    "run",
    "run_coupled",
    "sample_interarrival",
    "sample_sojourn",
    "__version__",
]
