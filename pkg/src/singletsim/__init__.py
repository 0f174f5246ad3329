"""Monte Carlo simulator and verification suite for communication-free
hidden-variable models of spin-singlet correlations."""

__version__ = "0.1.0"
