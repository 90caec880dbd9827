"""Multi-label bat call classification with a ConvNet-Transformer hybrid."""

__version__ = "0.1.0"
