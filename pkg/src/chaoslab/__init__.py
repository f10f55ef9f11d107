"""Chaos experiments against a deterministic simulated microservice control plane."""

__version__ = "0.1.0"
