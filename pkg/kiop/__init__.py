"""Knowledge-in-One-Prompt: store several frozen classifiers in one visual prompt."""

__version__ = "0.1.0"

__all__ = ["__version__"]
