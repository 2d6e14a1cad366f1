"""Cross-media similarity learning: a two-pathway embedding network plus a
learned pairwise metric, with retrieval evaluation and synthetic data."""

__version__ = "0.1.0"
