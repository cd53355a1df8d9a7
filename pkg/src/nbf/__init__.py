"""Neural stochastic barrier functions: training, certification and validation."""

__version__ = "0.1.0"
