"""Evaluation machinery: metrics, few-shot runs, retrieval consistency, ablations."""

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from refdx.corpus import Corpus, ReferenceCase, cluster_labels
from refdx.errors import DomainError, ShapeError
from refdx.evidence import AblationMask, HeadConfig, predict_examples, prepare_examples, train_head
from refdx.labels import TASK_ARITY, TASK_CLASSES, Binary, Task, combined_text, parse_task
from refdx.numerics import make_rng
from refdx.retrieval import top_k

log = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "macro_precision", "macro_recall", "macro_f1", "macro_specificity")
DEFAULT_FEW_SHOT_KS = (5, 10, 20, 50, 100)
HIST_BINS = 64


@dataclass(frozen=True)
class MetricsBundle:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_specificity: float

    def to_dict(self):
        return asdict(self)

    def as_array(self):
        return np.array([getattr(self, m) for m in METRIC_NAMES])


def _ratio(num, den):
    return num / den if den > 0 else 0.0


def _class_terms(cm, c):
    tp = cm[c, c]
    fp = cm[:, c].sum() - tp
    fn = cm[c, :].sum() - tp
    tn = cm.sum() - tp - fp - fn
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    f1 = _ratio(2 * p * r, p + r)
    spec = _ratio(tn, tn + fp)
    return p, r, f1, spec


def confusion_matrix(preds, truths, n_classes):
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truths, preds), 1)
    return cm


def compute_metrics(preds, truths, n_classes, labels=None, positive_class=None):
    """Accuracy plus macro precision, recall, F1 and specificity.

    Per-class terms with a zero denominator count as 0, and a class absent
    from both ``truths`` and ``preds`` contributes 0 to every macro term.
    ``labels`` restricts the macro average to the given classes instead.
    With ``positive_class`` set, P/R/F1/specificity are those of that class
    alone (binary reporting).
    """
    preds = np.asarray(preds)
    truths = np.asarray(truths)
    if preds.ndim != 1 or truths.ndim != 1:
        raise ShapeError("preds and truths must be 1-D label sequences")
    if preds.shape != truths.shape:
        raise ShapeError(f"{preds.shape[0]} predictions for {truths.shape[0]} truths")
    if preds.shape[0] == 0:
        raise DomainError("cannot score an empty prediction set")
    if n_classes < 1:
        raise DomainError("n_classes must be positive")
    for arr in (preds, truths):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise DomainError(f"labels must lie in [0, {n_classes})")
    cm = confusion_matrix(preds, truths, n_classes)
    acc = float(np.trace(cm) / cm.sum())
    if positive_class is not None:
        if not 0 <= positive_class < n_classes:
            raise DomainError("positive_class outside the label range")
        p, r, f1, spec = _class_terms(cm, positive_class)
        return MetricsBundle(acc, float(p), float(r), float(f1), float(spec))
    classes = range(n_classes) if labels is None else sorted(set(int(c) for c in labels))
    if not classes:
        raise DomainError("labels must name at least one class")
    present = set(preds.tolist()) | set(truths.tolist())
    terms = np.array([_class_terms(cm, c) if c in present else (0.0, 0.0, 0.0, 0.0) for c in classes])
    p, r, f1, spec = terms.mean(axis=0)
    return MetricsBundle(acc, float(p), float(r), float(f1), float(spec))


def task_metrics(preds, truths, task):
    """Metrics with the reporting convention of ``task`` (positive class for binary)."""
    task = parse_task(task)
    pos = list(Binary).index(Binary.DEMENTED) if task is Task.BINARY else None
    return compute_metrics(preds, truths, TASK_ARITY[task], positive_class=pos)


# --- splitting and sampling ------------------------------------------------

def split_corpus(corpus, fractions=(0.6, 0.2, 0.2), seed=0, task=Task.ABNORMALITY):
    """Stratified split into len(fractions) disjoint corpora."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.ndim != 1 or fr.size < 1 or np.any(fr < 0) or fr.sum() <= 0:
        raise DomainError("fractions must be non-negative with a positive sum")
    fr = fr / fr.sum()
    rng = make_rng(seed)
    y = corpus.labels(task)
    parts = [[] for _ in fr]
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        cuts = np.round(np.cumsum(fr) * idx.size).astype(int)
        for j, chunk in enumerate(np.split(idx, cuts[:-1])):
            parts[j].extend(chunk.tolist())
    return [corpus.subset(sorted(p)) for p in parts]


def sample_per_class(corpus, task, k, rng):
    """Indices of ``min(k, count)`` cases per class, drawn without replacement."""
    task = parse_task(task)
    y = corpus.labels(task)
    chosen = []
    for c, label in enumerate(TASK_CLASSES[task]):
        idx = np.flatnonzero(y == c)
        if idx.size == 0:
            raise DomainError(f"class {label.value!r} has no candidate training cases")
        chosen.extend(rng.choice(idx, size=min(k, idx.size), replace=False).tolist())
    return sorted(chosen)


def _run_rng(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def train_and_score(train_refs, val, test, task, config, mask=None):
    """Retrieve from ``train_refs`` for every split, train a head, score the test split."""
    k = config.k
    tr = prepare_examples(train_refs, train_refs, task, k, leave_one_out=True)
    va = prepare_examples(val, train_refs, task, k)
    te = prepare_examples(test, train_refs, task, k)
    model, history = train_head(tr, va, task, config, mask)
    pred, _, _ = predict_examples(model, te)
    return task_metrics(pred, te.y, task), history


# --- few-shot ----------------------------------------------------------------

@dataclass
class FewShotReport:
    task: str
    ks: list
    runs: int
    mean: dict  # k -> {metric: value}
    std: dict
    per_run: dict = field(default_factory=dict)  # k -> list of metric dicts

    def to_dict(self):
        return {"task": self.task, "ks": self.ks, "runs": self.runs,
                "mean": {str(k): v for k, v in self.mean.items()},
                "std": {str(k): v for k, v in self.std.items()},
                "per_run": {str(k): v for k, v in self.per_run.items()}}

    def to_table(self):
        header = ["k"] + [f"{m} (mean±std)" for m in METRIC_NAMES]
        rows = [[str(k)] + [f"{self.mean[k][m]:.4f}±{self.std[k][m]:.4f}" for m in METRIC_NAMES]
                for k in self.ks]
        return format_table(header, rows)


def _summarize(bundles):
    arr = np.array([b.as_array() for b in bundles])
    mean = dict(zip(METRIC_NAMES, arr.mean(axis=0).tolist()))
    std = dict(zip(METRIC_NAMES, arr.std(axis=0).tolist()))
    return mean, std


def few_shot(pool, val, test, task, ks=DEFAULT_FEW_SHOT_KS, runs=10, seed=0, config=None):
    """Train on ``min(k, class count)`` sampled cases per class, ``runs`` times per k.

    The sampled cases double as the retrieval corpus for every split, so a
    run never sees labels outside its sample. Validation and test splits are
    fixed across runs and must be disjoint from the pool.
    """
    task = parse_task(task)
    if runs < 1:
        raise DomainError("runs must be at least 1")
    config = config or HeadConfig()
    pool_ids = {c.id for c in pool}
    for name, split in (("validation", val), ("test", test)):
        if any(c.id in pool_ids for c in split):
            raise DomainError(f"{name} split overlaps the candidate training pool")
    mean, std, per_run = {}, {}, {}
    for k in ks:
        if k < 1:
            raise DomainError("few-shot k must be positive")
        bundles = []
        for r in range(runs):
            rng = _run_rng(seed, k, r)
            refs = pool.subset(sample_per_class(pool, task, k, rng))
            cfg = HeadConfig(**{**asdict(config), "seed": int(rng.integers(2**31))})
            metrics, _ = train_and_score(refs, val, test, task, cfg)
            bundles.append(metrics)
            log.info("few-shot k=%d run=%d f1=%.4f", k, r, metrics.macro_f1)
        mean[k], std[k] = _summarize(bundles)
        per_run[k] = [b.to_dict() for b in bundles]
    return FewShotReport(task.value, list(ks), runs, mean, std, per_run)


# --- retrieval consistency -------------------------------------------------

CONSISTENCY_TASKS = (Task.ABNORMALITY, Task.DEMENTIA_TYPE)


def _retrieve_all(corpus_train, queries, k):
    """Top-k hits per query; a query that is itself a corpus member is excluded."""
    if len(queries) == 0:
        raise DomainError("query set is empty")
    out = []
    for case in queries.cases:
        exclude = (case.id,) if case.id in corpus_train else ()
        out.append(top_k(case.image, corpus_train, k, exclude=exclude))
    return out


@dataclass
class ConsistencyCurve:
    k_max: int
    curves: dict  # task value -> list of MetricsBundle for k = 1..k_max

    def f1(self, task, k):
        return self.curves[parse_task(task).value][k - 1].macro_f1

    def to_dict(self):
        return {"k_max": self.k_max,
                "curves": {t: [dict(k=i + 1, **b.to_dict()) for i, b in enumerate(bs)]
                           for t, bs in self.curves.items()}}

    def to_table(self):
        header = ["task", "k", "macro_precision", "macro_recall", "macro_f1"]
        rows = [[t, str(i + 1), f"{b.macro_precision:.4f}", f"{b.macro_recall:.4f}", f"{b.macro_f1:.4f}"]
                for t, bs in self.curves.items() for i, b in enumerate(bs)]
        return format_table(header, rows)


def retrieval_consistency(corpus_train, queries, k_max=10):
    """Agreement between query labels and the labels of their top-k references.

    For each k every (query, retrieved case) pair within the top k is pooled,
    the retrieved label is taken as the prediction and the query label as
    the truth, and macro P/R/F1 are averaged over the classes that occur.
    """
    if k_max < 1:
        raise DomainError("k_max must be at least 1")
    hits = _retrieve_all(corpus_train, queries, k_max)
    curves = {}
    for task in CONSISTENCY_TASKS:
        qy = queries.labels(task)
        ry = corpus_train.labels(task)
        bundles = []
        for k in range(1, k_max + 1):
            truths = np.array([qy[i] for i, hs in enumerate(hits) for _ in hs[:k]])
            preds = np.array([ry[h.index] for hs in hits for h in hs[:k]])
            present = np.union1d(truths, preds)
            bundles.append(compute_metrics(preds, truths, TASK_ARITY[task], labels=present))
        curves[task.value] = bundles
    return ConsistencyCurve(k_max, curves)


@dataclass
class StratumStats:
    count: int
    mean: float = None
    std: float = None
    min: float = None
    max: float = None
    histogram: list = None

    def to_dict(self):
        return asdict(self)


@dataclass
class SimilarityDistribution:
    task: str
    k: int
    bin_edges: list
    match: StratumStats
    mismatch: StratumStats

    def to_dict(self):
        return {"task": self.task, "k": self.k, "bin_edges": self.bin_edges,
                "match": self.match.to_dict(), "mismatch": self.mismatch.to_dict()}

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "count_match", "count_mismatch"])
        for i in range(HIST_BINS):
            w.writerow([repr(self.bin_edges[i]), repr(self.bin_edges[i + 1]),
                        self.match.histogram[i], self.mismatch.histogram[i]])
        return buf.getvalue()


def _stratum(values, edges):
    values = np.asarray(values, dtype=np.float64)
    counts, _ = np.histogram(np.clip(values, -1.0, 1.0), bins=edges)
    if values.size == 0:
        return StratumStats(0, histogram=counts.tolist())
    return StratumStats(int(values.size), float(values.mean()), float(values.std()),
                        float(values.min()), float(values.max()), counts.tolist())


def similarity_distribution(corpus_train, queries, k=1, task=Task.ABNORMALITY):
    """Cosine similarities of top-k pairs split by whether the labels agree."""
    task = parse_task(task)
    hits = _retrieve_all(corpus_train, queries, k)
    qy = queries.labels(task)
    ry = corpus_train.labels(task)
    match, mismatch = [], []
    for i, hs in enumerate(hits):
        for h in hs:
            (match if ry[h.index] == qy[i] else mismatch).append(h.sim)
    edges = np.linspace(-1.0, 1.0, HIST_BINS + 1)
    return SimilarityDistribution(task.value, k, edges.tolist(), _stratum(match, edges), _stratum(mismatch, edges))


# --- ablation ----------------------------------------------------------------

@dataclass
class AblationReport:
    task: str
    runs: int
    variants: list
    mean: dict  # variant -> {metric: value}
    std: dict
    delta: dict  # variant mean minus full mean
    per_run: dict  # variant -> list of metric dicts

    def f1_deltas(self, variant):
        """Per-run macro-F1 of ``variant`` minus the full model."""
        return np.array([v["macro_f1"] for v in self.per_run[variant]]) - \
            np.array([v["macro_f1"] for v in self.per_run["full"]])

    def to_dict(self):
        return asdict(self)

    def to_table(self):
        header = ["variant"] + [f"{m} (mean±std)" for m in METRIC_NAMES] + ["delta_f1"]
        rows = [[v] + [f"{self.mean[v][m]:.4f}±{self.std[v][m]:.4f}" for m in METRIC_NAMES]
                + [f"{self.delta[v]['macro_f1']:+.4f}"] for v in self.variants]
        return format_table(header, rows)


def run_ablation(train, val, test, task, variants, seed=0, runs=1, config=None):
    """Retrain the head once per variant per run and compare with the full model.

    ``variants`` maps names to masks (or is a list of preset names). Run ``r``
    uses head seed ``seed + r`` for every variant, so a variant with an
    empty mask reproduces the full model exactly.
    """
    task = parse_task(task)
    if runs < 1:
        raise DomainError("runs must be at least 1")
    config = config or HeadConfig()
    if not isinstance(variants, dict):
        variants = {v: AblationMask.named(v) for v in variants}
    variants = {"full": AblationMask(), **{n: m for n, m in variants.items() if n != "full"}}
    tr = prepare_examples(train, train, task, config.k, leave_one_out=True)
    va = prepare_examples(val, train, task, config.k)
    te = prepare_examples(test, train, task, config.k)
    per_run = {name: [] for name in variants}
    for r in range(runs):
        cfg = HeadConfig(**{**asdict(config), "seed": seed + r})
        for name, mask in variants.items():
            model, _ = train_head(tr, va, task, cfg, mask)
            pred, _, _ = predict_examples(model, te)
            per_run[name].append(task_metrics(pred, te.y, task))
            log.info("ablation %s run=%d f1=%.4f", name, r, per_run[name][-1].macro_f1)
    mean, std, delta = {}, {}, {}
    for name, bundles in per_run.items():
        mean[name], std[name] = _summarize(bundles)
    for name in variants:
        delta[name] = {m: mean[name][m] - mean["full"][m] for m in METRIC_NAMES}
    return AblationReport(task.value, runs, list(variants), mean, std, delta,
                          {n: [b.to_dict() for b in bs] for n, bs in per_run.items()})


def make_context_task(n_per_class=50, dim=16, n_sectors=16, margin=0.25, code_scale=1.0,
                      noise=0.01, seed=0, id_prefix="ctx"):
    """Cases whose class is readable from reference text but barely from the image.

    Image embeddings lie near the unit circle in the first two dims, at an
    angle inside one of ``n_sectors`` equal sectors (kept ``margin`` of a
    sector away from its edges); the class is the sector index mod 4, so
    neighbours by image share a class while the class is a rapidly
    alternating function of the angle. The three text modalities hold a
    one-hot class code in dims 2..5. Every case gets N(0, noise^2) jitter.
    """
    if dim < 6:
        raise DomainError("context task needs dim >= 6")
    if n_sectors % 4 or n_sectors < 4:
        raise DomainError("n_sectors must be a positive multiple of 4")
    if not 0 <= margin < 0.5:
        raise DomainError("margin must lie in [0, 0.5)")
    rng = make_rng(seed)
    width = 2 * np.pi / n_sectors
    cases = []
    for c in range(4):
        abn, dem, sev = cluster_labels(c)
        sectors = rng.choice(np.arange(c, n_sectors, 4), size=n_per_class)
        offsets = rng.uniform(margin, 1.0 - margin, size=n_per_class)
        theta = (sectors + offsets) * width
        jitter = rng.normal(0.0, noise, size=(n_per_class, 4, dim))
        for i in range(n_per_class):
            img = np.zeros(dim)
            img[0], img[1] = np.cos(theta[i]), np.sin(theta[i])
            code = np.zeros(dim)
            code[2 + c] = code_scale
            emb = np.stack([img, code, code, code]) + jitter[i]
            cases.append(ReferenceCase(
                id=f"{id_prefix}-c{c}-{i:04d}", image=emb[0], abn=emb[1], dx=emb[2], desc=emb[3],
                abnormality=abn, dementia=dem, severity=sev, description=combined_text(abn, dem),
            ))
    return Corpus(cases, dim, provenance=f"context task: sectors={n_sectors} margin={margin} seed={seed}")


# --- output helpers ----------------------------------------------------------

def format_table(header, rows):
    """Left-aligned plain-text table with columns padded to a common width."""
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)] if rows else [len(h) for h in header]
    lines = ["  ".join(str(x).ljust(w) for x, w in zip(line, widths)).rstrip() for line in [header, *rows]]
    return "\n".join(lines) + "\n"


def metrics_table(named_bundles):
    header = ["name", *METRIC_NAMES]
    rows = [[name, *(f"{getattr(b, m):.4f}" for m in METRIC_NAMES)] for name, b in named_bundles.items()]
    return format_table(header, rows)


def dumps(obj):
    """Deterministic JSON (sorted keys, trailing newline)."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
