"""skyforge: aerial-to-ground cross-view synthesis at desk scale."""

__version__ = "0.1.0"
