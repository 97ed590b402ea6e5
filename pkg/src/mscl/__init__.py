"""Segment-enhanced contrastive report generation pipeline at desk scale."""

__version__ = "0.1.0"
