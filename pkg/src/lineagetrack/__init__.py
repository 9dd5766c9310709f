"""Cell lineage tracking: backward prompt-driven linking, forward similarity
tracking for large 3D+t data, and AOGM/TRA/SEG evaluation."""

__version__ = "0.1.0"
