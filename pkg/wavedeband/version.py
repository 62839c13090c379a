"""Installed version of the wavedeband distribution."""

from importlib import metadata

try:
    __version__ = metadata.version("wavedeband")
except metadata.PackageNotFoundError:
    # Running from a source checkout that was never installed.
    __version__ = "0.0.0"
del metadata
