"""Quantum-trajectory simulation of measurement-induced synchronization in monitored spin chains."""

__version__ = "0.1.0"
