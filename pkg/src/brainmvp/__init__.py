"""Multi-modal volume pre-training with cross-modal masked reconstruction and modality templates."""
__version__ = "0.1.0"
