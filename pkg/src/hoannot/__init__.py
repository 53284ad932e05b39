"""Multi-view, contact-aware hand-object pose annotation."""

__version__ = "0.1.0"
