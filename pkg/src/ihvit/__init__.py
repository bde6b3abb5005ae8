"""IH-ViT: hybrid CNN + dual-channel ViT defect classifier toolkit."""

__version__ = "0.1.0"
