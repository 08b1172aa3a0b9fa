"""Lab-of-origin attribution for engineered plasmid sequences."""

__version__ = "0.1.0"
