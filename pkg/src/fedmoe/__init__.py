"""Federated fine-tuning simulator with sparse mixture-of-experts adapters."""

__version__ = "0.1.0"
