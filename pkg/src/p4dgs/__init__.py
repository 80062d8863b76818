"""Compact dynamic Gaussian splatting.

Anchor-based scene model with learned spatial/temporal prediction, adaptive
quantization with a conditional entropy model, and a range-coded container
format for the compressed scene.
"""

__version__ = "0.1.0"
