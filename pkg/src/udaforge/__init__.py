"""udaforge: k-space artifact synthesis and distance-guided domain adaptation."""

__version__ = "0.1.0"
