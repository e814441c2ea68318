"""Scene-graph-conditioned image generation lab."""

__version__ = "0.1.0"
