"""Cell instance labels from point annotations, tiled segmentation and evaluation."""

__version__ = "0.1.0"
