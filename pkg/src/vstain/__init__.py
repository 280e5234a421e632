"""Virtual staining toolkit: patch-based fluorescence prediction from label-free microscopy."""

__version__ = "0.1.0"
