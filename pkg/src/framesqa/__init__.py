"""Frame-level speech quality scores with slice-consistency training."""

__version__ = "0.1.0"
