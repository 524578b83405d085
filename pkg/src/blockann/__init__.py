"""Disk-resident graph index with block-shuffled layout and block search."""

__version__ = "0.1.0"
