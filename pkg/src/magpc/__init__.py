"""Decentralized online control of a shared linear plant with gradient-perturbation learners."""

__version__ = "0.1.0"
