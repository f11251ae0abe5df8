"""Scene graph generation on the edge dual of a candidate object graph."""

__version__ = "0.1.0"
