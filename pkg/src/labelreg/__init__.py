"""Label-structure regularization for semantic segmentation.

Phase 1 fits an autoencoder over label maps; phase 2 trains a hypercolumn
segmentation network with an auxiliary branch through the frozen decoder.
"""

__version__ = "0.1.0"
