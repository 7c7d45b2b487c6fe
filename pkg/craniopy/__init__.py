# Cross-modal landmark-graph matching
__version__ = "0.1.0"
