"""Reflecting Brownian motion on manifolds with boundary: damped gradient,
quasi-invariant flows and Monte Carlo checks of path-space calculus."""

from .geometry import Disk, HalfLine, HalfSpace, Hemisphere, Interval, make_geometry
from .pathsim import PathSample, TimeGrid, paired_simulate, simulate
from .streams import RandomSource

__version__ = "0.1.0"

__all__ = [
    "Disk",
    "HalfLine",
    "HalfSpace",
    "Hemisphere",
    "Interval",
    "PathSample",
    "RandomSource",
    "TimeGrid",
    "make_geometry",
    "paired_simulate",
    "simulate",
]
