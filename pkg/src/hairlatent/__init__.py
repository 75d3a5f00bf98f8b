"""Move a hairstyle between two portraits by optimizing generator latent codes."""

__version__ = "0.1.0"
