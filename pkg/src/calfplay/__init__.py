"""Calf play-behaviour analysis: event logs, frame alignment, welfare statistics, MLP classifier."""

__version__ = "0.1.0"
