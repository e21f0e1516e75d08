"""Desk-scale automated optical inspection line for six-sided DIP components.

Subpackages cover the full loop: synthetic labeled imagery, classical and
single-image-GAN augmentation, a threshold baseline detector, a grid object
detector trained on a small deterministic autodiff kernel, evaluation
metrics, a six-station line simulator, and an HTTP supervision service.
"""

__version__ = "0.1.0"
