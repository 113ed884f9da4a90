"""Reference corpus: data model, binary index persistence and synthetic generation.

On disk a corpus is a JSON manifest plus an embedding blob::

    b"REMB" | version u32 | count u32 | dim u32 | count*dim float32   (all LE)

Each case owns four consecutive rows (image, abnormality text, dementia
text, description text) starting at its ``row``; anchor rows follow the
cases. Embeddings are held as float64 in memory but always rounded through
float32 so a save/load round trip is bit-exact.
"""

import json
import struct
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from refdx.errors import (
    CaseLookupError,
    DimMismatchError,
    DomainError,
    DuplicateIdError,
    ManifestError,
    ShapeError,
    TruncatedBlobError,
)
from refdx.labels import (
    TASK_ARITY,
    TASK_CLASSES,
    Abnormality,
    Binary,
    Dementia,
    Severity,
    Task,
    combined_text,
    parse_label,
    parse_task,
)
from refdx.numerics import make_rng

MAGIC = b"REMB"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIII")
ROWS_PER_CASE = 4
MODALITIES = ("image", "abnormality", "dementia", "description")

_CASE_KEYS = {"id", "abnormality", "dementia", "description", "row", "severity"}
_TOP_KEYS = {"version", "dim", "count", "cases", "anchors", "provenance"}

DEMENTIA_FOR_ABNORMALITY = {
    Abnormality.NORMAL: Dementia.NON_DEMENTIA,
    Abnormality.MTL_ATROPHY: Dementia.AD,
    Abnormality.WMH: Dementia.OTHER_DEMENTIA,
    Abnormality.OTHER_ATROPHY: Dementia.OTHER_DEMENTIA,
}


def _f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


@dataclass(eq=False)
class ReferenceCase:
    id: str
    image: np.ndarray
    abn: np.ndarray
    dx: np.ndarray
    desc: np.ndarray
    abnormality: Abnormality
    dementia: Dementia
    description: str = ""
    severity: Severity = None

    def __post_init__(self):
        self.abnormality = parse_label(Abnormality, self.abnormality)
        self.dementia = parse_label(Dementia, self.dementia)
        if self.severity is not None:
            self.severity = parse_label(Severity, self.severity)
        self.image, self.abn, self.dx, self.desc = (
            _f32(self.image), _f32(self.abn), _f32(self.dx), _f32(self.desc))
        dims = {v.shape for v in self.modalities()}
        if len(dims) != 1 or next(iter(dims)) != (self.image.shape[0],) or self.image.ndim != 1:
            raise ShapeError(f"case {self.id}: all four embeddings must be 1-D of equal length")

    @property
    def dim(self):
        return self.image.shape[0]

    def modalities(self):
        return (self.image, self.abn, self.dx, self.desc)

    def label(self, task):
        if task is Task.ABNORMALITY:
            return self.abnormality
        if task is Task.DEMENTIA_TYPE:
            return self.dementia
        if task is Task.SEVERITY:
            if self.severity is None:
                raise DomainError(f"case {self.id} has no severity label")
            return self.severity
        if task is Task.BINARY:
            return Binary.NON_DEMENTED if self.dementia is Dementia.NON_DEMENTIA else Binary.DEMENTED
        raise DomainError(f"unknown task {task!r}")


@dataclass(eq=False)
class AnchorSet:
    task: Task
    classes: tuple
    embeddings: np.ndarray

    def __post_init__(self):
        self.task = parse_task(self.task)
        canonical = TASK_CLASSES[self.task]
        cls_type = type(canonical[0])
        self.classes = tuple(parse_label(cls_type, c) for c in self.classes)
        if len(self.classes) != TASK_ARITY[self.task]:
            raise DomainError(
                f"{self.task.value} anchors need {TASK_ARITY[self.task]} classes, got {len(self.classes)}")
        if self.classes != canonical:
            raise DomainError(f"{self.task.value} anchors must follow the canonical class order")
        self.embeddings = _f32(self.embeddings)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.classes):
            raise ShapeError("one anchor embedding per class required")

    @property
    def dim(self):
        return self.embeddings.shape[1]


class Corpus:
    """Immutable collection of reference cases sharing one embedding dimension."""

    def __init__(self, cases, dim, anchors=None, provenance=""):
        self.cases = tuple(cases)
        self.dim = int(dim)
        self.anchors = dict(anchors or {})
        self.provenance = provenance
        self._index = {}
        for i, case in enumerate(self.cases):
            if case.id in self._index:
                raise DuplicateIdError(f"duplicate case id {case.id!r}")
            if case.dim != self.dim:
                raise DimMismatchError(f"case {case.id!r} has dim {case.dim}, corpus dim {self.dim}")
            self._index[case.id] = i
        for task, anchor in self.anchors.items():
            if anchor.task is not task:
                raise DomainError("anchor set keyed under the wrong task")
            if anchor.dim != self.dim:
                raise DimMismatchError(f"{task.value} anchors have dim {anchor.dim}, corpus dim {self.dim}")

    def __len__(self):
        return len(self.cases)

    def __iter__(self):
        return iter(self.cases)

    def __getitem__(self, i):
        return self.cases[i]

    def __contains__(self, case_id):
        return case_id in self._index

    def index_of(self, case_id):
        try:
            return self._index[case_id]
        except KeyError:
            raise CaseLookupError(f"unknown case id {case_id!r}") from None

    def get(self, case_id):
        return self.cases[self.index_of(case_id)]

    def _stack(self, attr):
        if not self.cases:
            return np.zeros((0, self.dim))
        return np.ascontiguousarray(np.stack([getattr(c, attr) for c in self.cases]))

    @cached_property
    def images(self):
        return self._stack("image")

    @cached_property
    def texts(self):
        """``(N, 3, D)`` stack of the abnormality, dementia and description embeddings."""
        if not self.cases:
            return np.zeros((0, 3, self.dim))
        return np.stack([np.stack([c.abn, c.dx, c.desc]) for c in self.cases])

    def labels(self, task):
        task = parse_task(task)
        classes = TASK_CLASSES[task]
        return np.array([classes.index(c.label(task)) for c in self.cases], dtype=np.int64)

    def subset(self, indices, keep_anchors=True):
        return Corpus([self.cases[i] for i in indices], self.dim,
                      self.anchors if keep_anchors else None, self.provenance)


def save_index(corpus, manifest_path, blob_path):
    """Write ``corpus`` as a manifest + blob pair. Output bytes depend only on the corpus."""
    rows = []
    cases = []
    for case in corpus.cases:
        entry = {
            "id": case.id,
            "abnormality": case.abnormality.value,
            "dementia": case.dementia.value,
            "description": case.description,
            "row": len(rows),
        }
        if case.severity is not None:
            entry["severity"] = case.severity.value
        cases.append(entry)
        rows.extend(case.modalities())
    anchors = []
    for task in TASK_CLASSES:
        if task not in corpus.anchors:
            continue
        a = corpus.anchors[task]
        anchors.append({
            "task": task.value,
            "classes": [c.value for c in a.classes],
            "rows": list(range(len(rows), len(rows) + len(a.classes))),
        })
        rows.extend(a.embeddings)
    manifest = {
        "version": FORMAT_VERSION,
        "dim": corpus.dim,
        "count": len(corpus.cases),
        "cases": cases,
        "anchors": anchors,
        "provenance": corpus.provenance,
    }
    data = np.asarray(rows, dtype="<f4").reshape(len(rows), corpus.dim) if rows else np.zeros((0, corpus.dim), "<f4")
    blob = HEADER.pack(MAGIC, FORMAT_VERSION, len(rows), corpus.dim) + data.tobytes(order="C")
    Path(manifest_path).write_text(json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    Path(blob_path).write_bytes(blob)


def _read_blob(blob_path, dim):
    raw = Path(blob_path).read_bytes()
    if len(raw) < HEADER.size:
        raise TruncatedBlobError(f"{blob_path}: blob shorter than its {HEADER.size}-byte header")
    magic, version, count, blob_dim = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ManifestError(f"{blob_path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ManifestError(f"{blob_path}: unsupported blob version {version}")
    if blob_dim != dim:
        raise DimMismatchError(f"manifest dim {dim} but blob dim {blob_dim}")
    payload = raw[HEADER.size:]
    row_bytes = dim * 4
    available = len(payload) // row_bytes if row_bytes else 0
    truncated = len(payload) < count * row_bytes
    n_rows = min(count, available)
    data = np.frombuffer(payload[: n_rows * row_bytes], dtype="<f4").reshape(n_rows, dim)
    return data.astype(np.float64), count, truncated


def load_corpus(manifest_path, blob_path):
    """Load and validate a corpus written by :func:`save_index` (or any conforming writer)."""
    try:
        manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{manifest_path}: invalid JSON ({exc})") from None
    if not isinstance(manifest, dict):
        raise ManifestError("manifest must be a JSON object")
    extra = set(manifest) - _TOP_KEYS
    if extra:
        warnings.warn(f"ignoring unknown manifest fields: {sorted(extra)}", stacklevel=2)
    if manifest.get("version") != FORMAT_VERSION:
        raise ManifestError(f"unsupported manifest version {manifest.get('version')!r}")
    try:
        dim = int(manifest["dim"])
        entries = manifest["cases"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"manifest missing required field: {exc}") from None
    if dim < 1:
        raise ManifestError("dim must be positive")

    data, count, truncated = _read_blob(blob_path, dim)
    n_rows = data.shape[0]

    seen = set()
    cases = []
    for entry in entries:
        extra = set(entry) - _CASE_KEYS
        if extra:
            warnings.warn(f"case {entry.get('id')!r}: ignoring unknown fields {sorted(extra)}", stacklevel=2)
        cid = str(entry["id"])
        if cid in seen:
            raise DuplicateIdError(f"duplicate case id {cid!r}")
        seen.add(cid)
        row = int(entry["row"])
        if row < 0 or row + ROWS_PER_CASE > count:
            raise ManifestError(f"case {cid!r}: rows {row}..{row + 3} outside blob of {count} rows")
        if row + ROWS_PER_CASE > n_rows:
            raise TruncatedBlobError(f"blob truncated: embeddings of case {cid!r} are incomplete")
        cases.append(ReferenceCase(
            id=cid,
            image=data[row], abn=data[row + 1], dx=data[row + 2], desc=data[row + 3],
            abnormality=entry["abnormality"], dementia=entry["dementia"],
            description=entry.get("description", ""),
            severity=entry.get("severity"),
        ))

    anchors = {}
    for entry in manifest.get("anchors") or []:
        rows = [int(r) for r in entry["rows"]]
        if any(r < 0 or r >= count for r in rows):
            raise ManifestError(f"{entry['task']} anchor rows outside blob")
        if any(r >= n_rows for r in rows):
            raise TruncatedBlobError(f"blob truncated: {entry['task']} anchor embeddings are incomplete")
        a = AnchorSet(entry["task"], entry["classes"], data[rows])
        anchors[a.task] = a
    if truncated:
        raise TruncatedBlobError(f"blob holds fewer than the {count} rows its header declares")
    return Corpus(cases, dim, anchors, manifest.get("provenance", ""))


@dataclass
class SyntheticSpec:
    n_classes: int = 4
    n_per_class: int = 50
    dim: int = 32
    cluster_separation: float = 6.0
    noise_sigma: float = 1.0
    seed: int = 0
    id_prefix: str = "syn"
    with_anchors: bool = field(default=True)

    def validate(self):
        if self.n_classes < 2:
            raise DomainError("n_classes must be at least 2")
        if self.n_per_class < 1:
            raise DomainError("n_per_class must be at least 1")
        if self.dim < 2:
            raise DomainError("dim must be at least 2")
        if self.dim < self.n_classes:
            raise DomainError("dim must be at least n_classes (class means sit on coordinate axes)")
        if not self.noise_sigma > 0:
            raise DomainError("noise_sigma must be positive")
        if self.cluster_separation < 0:
            raise DomainError("cluster_separation must be non-negative")


def cluster_labels(c):
    abn = tuple(Abnormality)[c % 4]
    return abn, DEMENTIA_FOR_ABNORMALITY[abn], tuple(Severity)[c % 4]


def class_means(spec):
    means = np.zeros((spec.n_classes, spec.dim))
    means[np.arange(spec.n_classes), np.arange(spec.n_classes)] = spec.cluster_separation * spec.noise_sigma
    return means


def _anchor_sets(means, cluster_label_list):
    anchors = {}
    for task, pos in ((Task.ABNORMALITY, 0), (Task.DEMENTIA_TYPE, 1), (Task.SEVERITY, 2)):
        rows = []
        for cls in TASK_CLASSES[task]:
            members = [c for c, labs in enumerate(cluster_label_list) if labs[pos] is cls]
            if not members:
                break
            rows.append(means[members].mean(axis=0))
        else:
            anchors[task] = AnchorSet(task, TASK_CLASSES[task], np.stack(rows))
    return anchors


def generate_synthetic(spec):
    """Clustered corpus: class ``c`` has mean ``separation * sigma * e_c``.

    Every embedding of a case is its class mean plus N(0, sigma^2) noise.
    Anchors (exact class means, averaged over clusters sharing a label) are
    attached for every task whose classes are all covered.
    """
    spec.validate()
    rng = make_rng(spec.seed)
    means = class_means(spec)
    labs = [cluster_labels(c) for c in range(spec.n_classes)]
    cases = []
    for c in range(spec.n_classes):
        abn, dem, sev = labs[c]
        noise = rng.normal(0.0, spec.noise_sigma, size=(spec.n_per_class, ROWS_PER_CASE, spec.dim))
        for i in range(spec.n_per_class):
            emb = means[c] + noise[i]
            cases.append(ReferenceCase(
                id=f"{spec.id_prefix}-c{c}-{i:04d}",
                image=emb[0], abn=emb[1], dx=emb[2], desc=emb[3],
                abnormality=abn, dementia=dem, severity=sev,
                description=combined_text(abn, dem),
            ))
    anchors = _anchor_sets(means, labs) if spec.with_anchors else {}
    provenance = (f"synthetic: classes={spec.n_classes} per_class={spec.n_per_class} dim={spec.dim} "
                  f"separation={spec.cluster_separation} sigma={spec.noise_sigma} seed={spec.seed}")
    return Corpus(cases, spec.dim, anchors, provenance)
