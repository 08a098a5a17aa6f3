"""Gaussian-circuit simulation, key-rate evaluation and circuit search for photonic DIQKD."""

__version__ = "0.1.0"
