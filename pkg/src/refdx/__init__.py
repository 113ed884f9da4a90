"""Retrieval-guided, evidence-based diagnosis engine over precomputed embeddings."""

from refdx.backend import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
