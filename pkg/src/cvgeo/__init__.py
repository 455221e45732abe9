"""Street-to-aerial cross-view matching at desk scale.

Two-stream embedding models with hand-written gradients, triplet and
binomial losses with global hard-negative mining, retrieval recall, Grad-CAM
maps and orientation recovery by circular correlation of angular histograms.
"""

__version__ = "0.1.0"
