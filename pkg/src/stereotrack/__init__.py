"""Stereo X-ray tomography simulation and deformed fiducial tracking."""

__version__ = "0.1.0"
