"""Hash-encoded radiance fields with stereo rendering and streaming."""

__version__ = "0.1.0"
