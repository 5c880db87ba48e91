"""Dense-connected Transformer dual encoder for first-stage question retrieval."""

__version__ = "0.1.0"
