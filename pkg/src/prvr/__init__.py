"""Uncertainty-aware partially relevant video retrieval, desk scale.

A numpy library implementing probabilistic (Gaussian) video/text
embeddings, proxy-based contrastive matching, confidence-gated
set-to-set scoring, a reproducible synthetic corpus, and the retrieval
evaluation and analysis protocols that go with them.
"""

__version__ = "0.1.0"
