"""Text-prompted medical image segmentation toolkit.

Contrastive fine-tuning of image-text encoders, bottleneck saliency,
saliency-to-mask prompting, checkpoint-ensemble weak supervision and the
matching evaluation metrics, all runnable at desk scale on a synthetic
encoder.
"""

__version__ = "0.1.0"
