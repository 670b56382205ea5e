"""viewfuse: desk-scale multi-agent camera-only BEV perception simulator."""

__version__ = "0.1.0"
