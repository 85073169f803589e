"""Desk-scale cross-modal contrastive training lab.

Trains CLIP/CyCLIP-family variants on synthetic paired data with
hand-derived gradients, and ships the retrieval, zero-shot, and
hypersphere-geometry evaluation stack that goes with them.
"""

__version__ = "0.1.0"
