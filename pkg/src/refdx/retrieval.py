"""Exact top-k cosine retrieval of reference cases by image embedding."""

import warnings
from dataclasses import dataclass

import numpy as np

from refdx import backend
from refdx.errors import DomainError, ShapeError
from refdx.numerics import as_vector

DEFAULT_K = 3


@dataclass(frozen=True)
class RetrievalHit:
    case_id: str
    rank: int
    sim: float
    index: int


def top_k(query, corpus, k=DEFAULT_K, exclude=()):
    """Exhaustive scan over every corpus image embedding.

    Hits are ordered by similarity, ties by corpus insertion order. Case ids
    in ``exclude`` are skipped (leave-one-out retrieval for corpus members).
    Asking for more hits than candidates returns them all with a warning.
    """
    if k < 1:
        raise DomainError("k must be at least 1")
    if len(corpus) == 0:
        raise DomainError("cannot retrieve from an empty corpus")
    q = np.ascontiguousarray(as_vector(query, "query"))
    if q.shape[0] != corpus.dim:
        raise ShapeError(f"query dim {q.shape[0]} != corpus dim {corpus.dim}")
    scores = backend.cosine_scores(corpus.images, q)
    if np.any(np.isnan(scores)):
        raise DomainError("zero-norm query or reference embedding")
    available = len(corpus)
    if exclude:
        for cid in exclude:
            scores[corpus.index_of(cid)] = -np.inf
        available -= len(set(exclude))
        if available < 1:
            raise DomainError("every corpus case is excluded")
    if k > available:
        warnings.warn(f"k={k} exceeds the {available} available references; returning {available}",
                      stacklevel=2)
    idx = backend.top_k_indices(scores, min(k, available))
    return [RetrievalHit(corpus.cases[i].id, r + 1, float(scores[i]), int(i)) for r, i in enumerate(idx)]
