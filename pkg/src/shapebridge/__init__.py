"""Conditioning shape-valued SDEs with Doob h-transforms and learned scores."""

__version__ = "0.1.0"
