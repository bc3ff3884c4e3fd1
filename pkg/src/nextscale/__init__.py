"""Text-conditioned next-scale autoregressive image generation at desk scale."""

__version__ = "0.1.0"
