"""Two-agent physics-based interaction generation with a multi-stream diffusion transformer."""

__version__ = "0.1.0"
