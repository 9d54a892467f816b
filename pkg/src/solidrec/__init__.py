"""Dynamic sequential recommendation with semantic parameter generation, metacode and codebook learning."""

__version__ = "0.1.0"
