"""Simulation and numerical verification toolkit for one-dimensional random
walks among dynamical random conductances."""

from .env import (EnvSpec, LevelLaw, Edge, RateTrack, EnvironmentWindow, build_env, rate_at,
                  integrated_rate, shift_view)
from .errors import ConfigError, RangeError, WindowExhausted, NumericalError, AcceptanceFailure

__version__ = "0.1.0"
