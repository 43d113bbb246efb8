"""Contrastive text-to-image GAN laboratory on the procedural ShapesCap dataset."""

__version__ = "0.1.0"
