"""Structured diagnostic reports: assembly, text rendering and JSON round trips."""

import json
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources

import numpy as np

from refdx.errors import DomainError, ShapeError
from refdx.labels import DISPLAY, TASK_CLASSES, Abnormality, Binary, Dementia, Severity, Task, parse_label

SCHEMA_VERSION = "1"
PROB_TOL = 1e-6
SOURCES = ("zero-shot", "evidence-guided")

_PRED_KEYS = (("abnormality", Task.ABNORMALITY), ("dementia_type", Task.DEMENTIA_TYPE), ("severity", Task.SEVERITY))
_ENUM_FOR_TASK = {Task.ABNORMALITY: Abnormality, Task.DEMENTIA_TYPE: Dementia, Task.SEVERITY: Severity}


@dataclass(frozen=True)
class TaskPrediction:
    label: object
    probs: tuple


@dataclass(frozen=True)
class BinaryPrediction:
    label: Binary
    p_dementia: float
    raw_p_dementia: float = None


@dataclass(frozen=True)
class EvidenceRow:
    rank: int
    sim: float
    alpha: float
    abnormality: Abnormality
    dementia: Dementia
    description: str
    case_id: str = None


@dataclass(frozen=True)
class DiagnosticReport:
    abnormality: TaskPrediction
    dementia_type: TaskPrediction
    severity: TaskPrediction
    evidence_rows: tuple = ()
    binary: BinaryPrediction = None
    metadata: dict = field(default_factory=dict)

    def predictions(self):
        return {key: getattr(self, key) for key, _ in _PRED_KEYS}


def validate(report):
    """Raise DomainError unless the report satisfies its structural invariants."""
    for key, task in _PRED_KEYS:
        pred = getattr(report, key)
        classes = TASK_CLASSES[task]
        if pred.label not in classes:
            raise DomainError(f"{key} label {pred.label!r} is not a {task.value} class")
        if len(pred.probs) != len(classes):
            raise ShapeError(f"{key} has {len(pred.probs)} probabilities for {len(classes)} classes")
        p = np.asarray(pred.probs, dtype=np.float64)
        if np.any(p < 0) or abs(p.sum() - 1.0) > PROB_TOL:
            raise DomainError(f"{key} probabilities must be non-negative and sum to 1")
    if report.binary is not None and not 0.0 <= report.binary.p_dementia <= 1.0:
        raise DomainError("p_dementia must lie in [0, 1]")
    rows = report.evidence_rows
    if rows:
        if abs(sum(r.alpha for r in rows) - 1.0) > PROB_TOL:
            raise DomainError("attention weights must sum to 1")
        if any(a.sim < b.sim for a, b in zip(rows, rows[1:])):
            raise DomainError("evidence rows must be sorted by similarity")
        if [r.rank for r in rows] != list(range(1, len(rows) + 1)):
            raise DomainError("evidence ranks must run 1..k")
    return report


def _as_prediction(result):
    return TaskPrediction(result.predicted, tuple(float(x) for x in np.asarray(result.probs)))


def assemble(results, hits, alpha, corpus, metadata=None, sources=None):
    """Build a report from per-task results, retrieval hits and attention weights.

    ``results`` maps each Task to an object with ``predicted`` and ``probs``
    (binary: ``predicted`` and ``p_dementia``; optional). ``sources`` records
    per task whether the prediction is zero-shot or evidence-guided.
    Evidence rows are ordered by similarity, ties keeping retrieval order.
    """
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    if alpha.shape[0] != len(hits):
        raise ShapeError(f"{alpha.shape[0]} attention weights for {len(hits)} hits")
    raw_rows = []
    for h, a in zip(hits, alpha):
        case = corpus.get(h.case_id)
        raw_rows.append((float(h.sim), float(a), case))
    order = sorted(range(len(raw_rows)), key=lambda i: -raw_rows[i][0])
    rows = tuple(EvidenceRow(rank, s, a, c.abnormality, c.dementia, c.description, c.id)
                 for rank, (s, a, c) in enumerate((raw_rows[i] for i in order), start=1))
    binary = results.get(Task.BINARY)
    if binary is not None:
        binary = BinaryPrediction(binary.predicted, float(binary.p_dementia),
                                  float(getattr(binary, "raw_p_dementia", binary.p_dementia)))
    meta = dict(metadata or {})
    src = dict(sources or {})
    for key, task in _PRED_KEYS:
        src.setdefault(key, "zero-shot")
        if src[key] not in SOURCES:
            raise DomainError(f"unknown prediction source {src[key]!r}")
    meta["sources"] = src
    meta.setdefault("k", len(hits))
    report = DiagnosticReport(
        abnormality=_as_prediction(results[Task.ABNORMALITY]),
        dementia_type=_as_prediction(results[Task.DEMENTIA_TYPE]),
        severity=_as_prediction(results[Task.SEVERITY]),
        evidence_rows=rows, binary=binary, metadata=meta,
    )
    return validate(report)


# --- text --------------------------------------------------------------------

def _half_up(x, places):
    q = Decimal(1).scaleb(-places)
    return Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP)


def percent(p):
    """Nearest integer percent, halves rounded up."""
    return int(_half_up(float(Decimal(repr(float(p))) * 100), 0))


def _confidence_line(task, probs):
    parts = [f"{DISPLAY[c][1]}: {percent(p)}%" for c, p in zip(TASK_CLASSES[task], probs)]
    return ", ".join(parts)


_BLOCKS = (
    ("abnormality", Task.ABNORMALITY, "Abnormality Type", "Abnormality Confidence"),
    ("dementia_type", Task.DEMENTIA_TYPE, "Dementia Diagnosis", "Dementia Confidence"),
    ("severity", Task.SEVERITY, "Dementia Severity", "Severity Confidence"),
)
_COLS = ("#", "sim", "α", "Abnormality", "Dementia label", "Reference description")
_WIDTHS = (3, 6, 6, 15, 16)
_META_KEYS = (("corpus_id", "Corpus"), ("encoder_id", "Encoder"), ("k", "k"))


def _row_line(cells):
    head = "".join(str(c).ljust(w) for c, w in zip(cells, _WIDTHS))
    return (head + str(cells[-1])).rstrip()


def render_text(report, max_description=None):
    """Plain-text layout: three prediction blocks, optional binary line, evidence table."""
    lines = []
    for key, task, title, conf in _BLOCKS:
        pred = getattr(report, key)
        lines.append(f"{title}: {DISPLAY[pred.label][0]}")
        lines.append(f"{conf}: {_confidence_line(task, pred.probs)}")
        lines.append("")
        if key == "abnormality" and report.binary is not None:
            b = report.binary
            lines.append(f"Binary Diagnosis: {DISPLAY[b.label][0]}")
            lines.append(f"Dementia Probability: {_half_up(b.p_dementia, 2)} (from similarity scores)")
            lines.append("")
    lines.append(f"Evidence Table: Top-{len(report.evidence_rows)} Retrieved Reference Cases")
    lines.append(_row_line(_COLS))
    for r in report.evidence_rows:
        desc = r.description
        if max_description is not None and len(desc) > max_description:
            desc = desc[:max_description] + "..."
        lines.append(_row_line((r.rank, _half_up(r.sim, 2), _half_up(r.alpha, 2),
                                DISPLAY[r.abnormality][0], DISPLAY[r.dementia][1], desc)))
    alpha_sum = sum(r.alpha for r in report.evidence_rows)
    lines.append(f"Alpha sum: {_half_up(alpha_sum, 2)}")
    meta = report.metadata
    extra = [f"{label}: {meta[key]}" for key, label in _META_KEYS if meta.get(key) is not None]
    if meta.get("sources"):
        extra.append("Sources: " + ", ".join(f"{k}={v}" for k, v in meta["sources"].items()))
    if extra:
        lines.append("")
        lines.extend(extra)
    return "\n".join(lines) + "\n"


def _by_display(enum_cls, name, which):
    for member in enum_cls:
        if DISPLAY[member][which] == name:
            return member
    raise DomainError(f"unrecognized {enum_cls.__name__} name {name!r}")


def _parse_confidences(task, text):
    probs = []
    for part, cls in zip(text.split(", "), TASK_CLASSES[task]):
        name, _, pct = part.rpartition(": ")
        if name != DISPLAY[cls][1] or not pct.endswith("%"):
            raise DomainError(f"malformed confidence entry {part!r}")
        probs.append(int(pct[:-1]) / 100)
    if len(probs) != len(TASK_CLASSES[task]):
        raise DomainError(f"expected {len(TASK_CLASSES[task])} confidences")
    return tuple(probs)


def _split_row(line):
    cells, pos = [], 0
    for w in _WIDTHS:
        cells.append(line[pos:pos + w].strip())
        pos += w
    cells.append(line[pos:])
    return cells


def parse_text(text):
    """Recover a report from ``render_text`` output.

    Values carry the rendered precision (two decimals, integer percents),
    so the result is not validated; rendering it again reproduces the text.
    Case ids are not part of the text layout and come back as None.
    """
    lines = text.split("\n")
    fields = {}
    it = iter(enumerate(lines))
    values = {}
    for _, line in it:
        if line.startswith("Evidence Table:"):
            break
        key, sep, val = line.partition(": ")
        if sep:
            values[key] = val
    for key, task, title, conf in _BLOCKS:
        if title not in values or conf not in values:
            raise DomainError(f"missing {title!r} block")
        label = _by_display(_ENUM_FOR_TASK[task], values[title], 0)
        fields[key] = TaskPrediction(label, _parse_confidences(task, values[conf]))
    binary = None
    if "Binary Diagnosis" in values:
        p = float(values["Dementia Probability"].split(" ")[0])
        binary = BinaryPrediction(_by_display(Binary, values["Binary Diagnosis"], 0), p, p)
    next(it)  # column header
    rows = []
    meta = {}
    for _, line in it:
        if line.startswith("Alpha sum:"):
            break
        c = _split_row(line)
        rows.append(EvidenceRow(int(c[0]), float(c[1]), float(c[2]), _by_display(Abnormality, c[3], 0),
                                _by_display(Dementia, c[4], 1), c[5]))
    for _, line in it:
        key, sep, val = line.partition(": ")
        if not sep:
            continue
        for mkey, label in _META_KEYS:
            if key == label:
                meta[mkey] = int(val) if mkey == "k" else val
        if key == "Sources":
            meta["sources"] = dict(part.split("=", 1) for part in val.split(", "))
    return DiagnosticReport(evidence_rows=tuple(rows), binary=binary, metadata=meta, **fields)


# --- JSON --------------------------------------------------------------------

def load_schema():
    return json.loads(resources.files("refdx").joinpath("schemas/report.schema.json").read_text(encoding="utf-8"))


def to_document(report):
    preds = {}
    for key, task in _PRED_KEYS:
        pred = getattr(report, key)
        preds[key] = {"label": pred.label.value, "classes": [c.value for c in TASK_CLASSES[task]],
                      "probs": [float(p) for p in pred.probs]}
    b = report.binary
    preds["binary"] = None if b is None else {
        "label": b.label.value, "p_dementia": float(b.p_dementia),
        "raw_p_dementia": None if b.raw_p_dementia is None else float(b.raw_p_dementia)}
    evidence = [{"rank": r.rank, "case_id": r.case_id, "sim": float(r.sim), "alpha": float(r.alpha),
                 "abnormality": r.abnormality.value, "dementia": r.dementia.value,
                 "description": r.description} for r in report.evidence_rows]
    return {"schema_version": SCHEMA_VERSION, "predictions": preds, "evidence": evidence,
            "metadata": report.metadata}


def render_json(report):
    return json.dumps(to_document(report), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def validate_document(doc):
    import jsonschema
    jsonschema.validate(doc, load_schema())


def parse_json(text):
    doc = json.loads(text) if isinstance(text, str) else text
    validate_document(doc)
    preds = doc["predictions"]
    fields = {}
    for key, task in _PRED_KEYS:
        p = preds[key]
        if p["classes"] != [c.value for c in TASK_CLASSES[task]]:
            raise DomainError(f"{key} classes out of canonical order")
        fields[key] = TaskPrediction(parse_label(_ENUM_FOR_TASK[task], p["label"]), tuple(p["probs"]))
    b = preds.get("binary")
    binary = None if b is None else BinaryPrediction(parse_label(Binary, b["label"]), b["p_dementia"],
                                                     b.get("raw_p_dementia"))
    rows = tuple(EvidenceRow(e["rank"], e["sim"], e["alpha"], parse_label(Abnormality, e["abnormality"]),
                             parse_label(Dementia, e["dementia"]), e["description"], e.get("case_id"))
                 for e in doc["evidence"])
    return validate(DiagnosticReport(evidence_rows=rows, binary=binary, metadata=doc["metadata"], **fields))


def with_metadata(report, **extra):
    return replace(report, metadata={**report.metadata, **extra})
