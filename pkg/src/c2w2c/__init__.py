"""Character-to-word-to-character compositional language model."""

__version__ = "0.1.0"
