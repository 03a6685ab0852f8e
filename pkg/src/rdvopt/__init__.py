"""Impulsive rendezvous trajectory optimization with learned warm starts."""

__version__ = "0.1.0"
