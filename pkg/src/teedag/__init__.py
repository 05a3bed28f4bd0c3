"""Deterministic simulator for a TEE-assisted asynchronous DAG-BFT protocol."""

__version__ = "0.1.0"
