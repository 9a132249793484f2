"""Low-rank style adaptation of a small pixel-space video diffusion transformer."""

__version__ = "0.1.0"
