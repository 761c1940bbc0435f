"""Road segmentation from projected lidar point labels.

Trains a compact convolutional segmentation network on camera images using
sparse per-pixel supervision obtained by projecting labeled lidar returns
into the image, a masked binary cross-entropy loss restricted to those
pixels, and a synthetic scene generator that provides exact dense ground
truth for evaluation.
"""

__version__ = "0.1.0"
