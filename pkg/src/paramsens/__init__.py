"""Sensitivities of random-vector realizations to distribution parameters."""

__version__ = "0.1.0"
