"""Weakly supervised video salient object detection from fixation-guided scribbles."""

__version__ = "0.1.0"
