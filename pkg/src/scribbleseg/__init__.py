"""Weakly-supervised cell segmentation from sparse scribbles.

Training couples a self-supervised blind-spot reconstruction objective,
quantized through per-pixel Gaussian mixture heads, with a class-balanced
scribble loss; inference adds MC-dropout uncertainty maps that guide where
to annotate next.
"""

__version__ = "0.1.0"
