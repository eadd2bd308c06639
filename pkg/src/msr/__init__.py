"""Meta-learning symmetries by reparameterization: a numpy implementation."""

__version__ = "0.1.0"
