"""PMU/SCADA state estimation and chaos-based situational awareness."""

__version__ = "0.1.0"
