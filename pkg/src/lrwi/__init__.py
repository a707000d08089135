"""2-D frequency-domain waveform inversion: FWI, WRI and rank-2 lifted WRI.

All three methods share one Helmholtz discretization (5-point Laplacian,
first-order radiating boundary). Units are km, km/s, s^2/km^2 and Hz.
"""
from importlib.metadata import PackageNotFoundError, version as _version

try:
    __version__ = _version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"
