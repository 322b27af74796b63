"""Mixed-domain semi-supervised segmentation with virtual-domain bridging.

A small numpy autograd engine, a U-Net feature extractor, correlation-based
image synthesis, mixing augmentations, prototype heads, the mean-teacher
training loop, a synthetic multi-domain dataset and segmentation metrics.
"""

__version__ = "0.1.0"
