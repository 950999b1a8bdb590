"""Block-tower stability workbench.

Generates block-tower scenes, simulates and labels their stability, renders
monocular images, trains a small convolutional classifier on those images,
and compares its predictions with human ratings gathered through an HTTP
study service.
"""

__version__ = "0.1.0"
