"""Pure numpy versions of the retrieval kernels.

Signatures and tie-breaking match ``_kernels.pyx`` exactly; floating-point
results agree to rounding (the summation order differs).
"""

import numpy as np


def cosine_scores(rows, query):
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    query = np.ascontiguousarray(query, dtype=np.float64)
    # row-wise reductions keep a 1-row call bitwise equal to a row of an n-row call
    dots = (rows * query).sum(axis=1)
    row_norms = np.sqrt((rows * rows).sum(axis=1))
    q_norm = np.sqrt((query * query).sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        out = dots / (row_norms * q_norm)
    out[(row_norms == 0.0) | (q_norm == 0.0)] = np.nan
    return out


def top_k_indices(scores, k):
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    return order[: min(k, scores.shape[0])].astype(np.int64)
