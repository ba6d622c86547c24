"""Deployment-efficient exploration in linear MDPs."""

__version__ = "0.1.0"
