"""Training-free NAS toolkit: entropy/gradient-flow scoring and decoupled evolutionary search."""

__version__ = "0.1.0"
