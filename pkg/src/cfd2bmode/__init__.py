"""Coarse-to-fine generative translation of color-flow-Doppler ultrasound
video into synthetic B-mode video, with a synthetic phantom data generator,
the full evaluation battery, and a blinded reader-study service."""

__version__ = "0.1.0"
