"""Local-level relation transformer and mutually exclusive experts for scene graph generation."""

__version__ = "0.1.0"
