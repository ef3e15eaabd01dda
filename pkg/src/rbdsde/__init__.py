"""Monte Carlo laboratory for reflected backward doubly stochastic differential equations."""

__version__ = "0.1.0"
