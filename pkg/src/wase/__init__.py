"""Onset/offset-cue guided target speaker extraction at desk scale."""

__version__ = "0.1.0"
