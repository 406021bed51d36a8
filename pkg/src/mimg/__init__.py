"""Multi-hop instruction-tuning data synthesis pipeline."""

__version__ = "0.1.0"
