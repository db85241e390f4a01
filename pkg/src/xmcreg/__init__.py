"""Bi-encoder extreme multi-label retrieval with auxiliary pair-classifier
and margin-consistency regularization, on hand-checked float64 gradients."""

__version__ = "0.1.0"
