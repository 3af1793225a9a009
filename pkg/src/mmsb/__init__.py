"""Mixed membership stochastic blockmodels fit by nested variational EM."""

__version__ = "0.1.0"
