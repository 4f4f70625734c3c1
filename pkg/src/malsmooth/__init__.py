"""Byte-level malware classifier, append-patch attacks and window-ablation smoothing."""
__version__ = "0.1.0"
