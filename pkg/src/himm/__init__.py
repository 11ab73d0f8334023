"""Hidden input Markov model for energy-harvesting cognitive radio sensing."""

__version__ = "0.1.0"
