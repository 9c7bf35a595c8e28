"""Double-descent laboratory for under-complete autoencoders."""

__version__ = "0.1.0"
