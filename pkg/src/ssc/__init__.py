"""Weakly supervised segmentation with spatial structure constraints.

Trains an image-level classifier whose class activation maps are shaped by
two constraints: reconstructing the input image from the CAM features with a
perceptual loss, and aligning CAMs to superpixel-averaged versions of
themselves. Pseudo segmentation masks are then generated from the CAMs and
scored with mIoU.
"""

__version__ = "0.1.0"
