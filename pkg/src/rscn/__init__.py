"""Instance-free domain-adaptive detection with prototype consistency constraints."""

__version__ = "0.1.0"
