"""Systematic random-linear network coding over lossy links: codec, wire
framing, encoder/decoder pipeline, link simulator, and experiment harness.
"""

from . import channel, codec, framing, gf256, harness, pipeline

__all__ = ["channel", "codec", "framing", "gf256", "harness", "pipeline"]

__version__ = "0.1.0"
