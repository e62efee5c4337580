"""Cross-domain neural process recommender for cold-start users, on a small numpy autodiff engine."""

__version__ = "0.1.0"
