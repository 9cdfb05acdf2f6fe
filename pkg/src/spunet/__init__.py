"""Desk-scale latent-density probabilistic segmentation with an OT latent constraint."""

__version__ = "0.1.0"
