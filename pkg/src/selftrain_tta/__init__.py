"""Test-time self-training: adapt a source model to a shifted test distribution."""

__version__ = "0.1.0"
