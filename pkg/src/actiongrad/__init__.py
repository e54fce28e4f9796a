"""Decision-Transformer policies with inference-time action-gradient refinement."""

__version__ = "0.1.0"
