"""HARU-Net: hybrid attention residual U-Net for CBCT denoising.

Pipeline pieces: volume/slice I/O, image-domain noise simulation,
foreground segmentation, dynamic patching, the network itself, training,
tiled inference and image quality metrics.
"""

__version__ = "0.1.0"
