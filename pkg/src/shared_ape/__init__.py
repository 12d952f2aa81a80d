"""Neural automatic post-editing with two encoders and one shared attention."""

__version__ = "0.1.0"
