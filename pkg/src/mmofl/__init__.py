"""Multimodal online federated learning simulator with prototype-based
missing-modality mitigation."""

__version__ = "0.1.0"
