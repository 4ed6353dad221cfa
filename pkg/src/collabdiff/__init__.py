"""Collaborative multi-video diffusion toolkit at desk scale.

Epipolar attention masks, pairwise-to-many collaborative sampling over
pluggable pair denoisers, an analytic Gaussian world with exact scores,
a toy masked cross-view attention block and the two data-preparation
procedures (video folding, homography augmentation).
"""

__version__ = "0.1.0"
