"""Dynamic sparse attention transformer for exemplar-guided image generation."""

__version__ = "0.1.0"
