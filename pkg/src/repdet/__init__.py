"""Re-parameterizable detector components: fusion, assignment, losses,
quantization and evaluation geometry on numpy."""

__version__ = "0.1.0"
