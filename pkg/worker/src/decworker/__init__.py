"""Reference evaluation worker for decoder-architecture search."""

__version__ = "0.1.0"
