"""Label-geometry-aware conditional GAN: AAM auxiliary classifier and evaluation harness."""

__version__ = "0.1.0"
