"""Sparsified, bandwidth-aware decentralized SGD with seed-synchronized masks."""

__version__ = "1.0.0"
