"""Human-in-the-loop land cover segmentation toolkit."""

__version__ = "0.1.0"
