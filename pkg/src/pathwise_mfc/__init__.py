"""Mean-field control and games with Poisson common noise, solved path by path."""

__version__ = "0.1.0"
