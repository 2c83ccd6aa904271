"""LoRA fine-tuning of a ViT encoder-decoder for binary flood segmentation."""
__version__ = "0.1.0"
