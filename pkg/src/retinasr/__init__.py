"""Joint x4 super-resolution and retinal layer segmentation with a conditional GAN."""

__version__ = "0.1.0"
