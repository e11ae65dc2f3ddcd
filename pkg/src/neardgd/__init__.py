"""Simulator for nested decentralized gradient methods with multiple consensus and gradient steps."""

__version__ = "0.1.0"
