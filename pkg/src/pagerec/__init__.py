"""Segmentation-free handwritten page recognition.

A page image rescaled to height 64*L runs through a convolutional stack,
its feature map is flattened row-major into one long sequence, and a CTC
head transcribes the whole page without any line or word segmentation.
"""

__version__ = "0.1.0"
