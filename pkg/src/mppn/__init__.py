"""Multi-perspective process case representations from Gramian Angular Fields."""

__version__ = "0.1.0"
