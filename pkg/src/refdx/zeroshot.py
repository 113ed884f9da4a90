"""Anchor-matching zero-shot classification for the four diagnostic tasks."""

from dataclasses import dataclass

import numpy as np

from refdx import backend
from refdx.errors import ConfigError, DomainError, ShapeError
from refdx.labels import TASK_ARITY, Abnormality, Binary, Task
from refdx.numerics import as_vector, softmax


@dataclass
class ZeroShotResult:
    task: Task
    index: int
    predicted: object
    sims: np.ndarray
    probs: np.ndarray


@dataclass
class BinaryResult:
    predicted: Binary
    p_dementia: float
    # unclamped value; can leave [0, 1] when similarities are negative
    raw_p_dementia: float

    task = Task.BINARY


def classify(query, anchors):
    """Cosine similarity to each anchor, argmax prediction, softmax confidences.

    Ties go to the lowest class index.
    """
    q = np.ascontiguousarray(as_vector(query, "query"))
    if q.shape[0] != anchors.dim:
        raise ShapeError(f"query dim {q.shape[0]} != anchor dim {anchors.dim}")
    sims = backend.cosine_scores(np.ascontiguousarray(anchors.embeddings), q)
    if np.any(np.isnan(sims)):
        raise DomainError("zero-norm query or anchor")
    idx = int(np.argmax(sims))
    return ZeroShotResult(anchors.task, idx, anchors.classes[idx], sims, softmax(sims))


def binary_from_abnormality(abn_result):
    """Demented unless the closest abnormality anchor is Normal.

    ``p_dementia`` is ``1 - s_normal`` when Normal wins and ``s_closest``
    otherwise, clamped to [0, 1]. It is built from raw cosine similarities,
    not softmax probabilities, so its scale differs from the other tasks.
    """
    if abn_result.task is not Task.ABNORMALITY:
        raise DomainError("binary dementia is derived from the abnormality task only")
    sims = abn_result.sims
    if abn_result.predicted is Abnormality.NORMAL:
        label = Binary.NON_DEMENTED
        raw = 1.0 - float(sims[0])
    else:
        label = Binary.DEMENTED
        raw = float(sims[abn_result.index])
    return BinaryResult(label, min(1.0, max(0.0, raw)), raw)


def predict_all(query, anchor_sets):
    """Run the abnormality, dementia-type and severity tasks and derive binary."""
    out = {}
    for task in (Task.ABNORMALITY, Task.DEMENTIA_TYPE, Task.SEVERITY):
        anchors = anchor_sets.get(task)
        if anchors is None:
            raise ConfigError(f"missing anchor set for task {task.value!r}")
        if len(anchors.classes) != TASK_ARITY[task]:
            raise ConfigError(f"{task.value} anchors have the wrong arity")
        out[task] = classify(query, anchors)
    out[Task.BINARY] = binary_from_abnormality(out[Task.ABNORMALITY])
    return out
