"""Hough-transform line priors and semi-supervised lane detection."""

__version__ = "0.1.0"
