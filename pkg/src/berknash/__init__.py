"""Berk-Nash equilibria of misspecified Markov decision processes."""
__version__ = "0.1.0"
