"""Learned rate-distortion compression of massive-MIMO channel state
information, with a joint decoder for correlated users."""

__version__ = "0.1.0"
