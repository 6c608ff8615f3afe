"""Differentially private federated multimodal GCN simulation engine."""

__version__ = "0.1.0"
