"""Facial landmark tracking in motion-blurred video: structure prediction, deblurring, detection."""

__version__ = "0.1.0"
