"""Multi-task time-series foundation model for wireless prediction tasks."""

__version__ = "0.1.0"
