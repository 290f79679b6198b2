"""Deterministic microsimulation of a 4-2-1 lane-drop bottleneck with mixed
human/autonomous traffic, feedback metering, and a multi-agent control
environment."""

__version__ = "0.1.0"
