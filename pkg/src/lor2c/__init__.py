"""Low-rank residual connection adaptation on a toy transformer."""

__version__ = "0.1.0"
