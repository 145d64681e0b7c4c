"""Piecewise deterministic Monte Carlo: continuous-time MCMC, CIS and SMC."""

__version__ = "0.1.0"

from .pdp import (InvalidBoundError, NonFiniteStateError, RateBound, Skeleton, deterministic_flow,
                  first_event_inversion, first_event_thinning, simulate_pdp, state_at_time)
from .rng import RngStream

__all__ = [
    "InvalidBoundError", "NonFiniteStateError", "RateBound", "RngStream", "Skeleton",
    "deterministic_flow", "first_event_inversion", "first_event_thinning", "simulate_pdp",
    "state_at_time",
]
