"""Long-tailed recognition with fused foundation-model features."""
__version__ = "0.1.0"
