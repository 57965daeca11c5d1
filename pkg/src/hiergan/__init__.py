"""Segmentation-conditioned hierarchical GANs for expression translation.

A desk-scale pipeline coupling a trainable semantic segmentation network
with one global and four local GANs plus a fusion network, trained on a
procedurally rendered face dataset with exact ground truth.
"""

__version__ = "0.1.0"
