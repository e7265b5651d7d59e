"""Cubature Kalman filtering with parameter desensitization."""

__version__ = "0.1.0"
