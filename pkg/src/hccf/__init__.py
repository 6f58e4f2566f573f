"""Recommendation with learned hypergraph message passing and cross-view contrastive training."""

__version__ = "0.1.0"
