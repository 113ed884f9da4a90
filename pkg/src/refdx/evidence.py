"""Evidence encoding and the attention-based inference head.

Per retrieved reference ``i`` with modalities ``z_i = [image, abn, dx, desc]``
and retrieval similarity ``s_i``::

    e_i   = relu([z_i, s_i * z_i] @ W1 + b1) @ W_proj          (rows of E, k x D)
    alpha = softmax(E @ (q @ W_q))                              (no 1/sqrt(D) scaling)
    e_bar = alpha @ E
    logits = relu([q, e_bar] @ A1 + c1) @ A2 + c2

Gradients are written out by hand for the whole composite. Evidence encoder
and head are trained jointly with cross-entropy and Adam.
"""

import copy
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from refdx.errors import ConfigError, DomainError, ShapeError
from refdx.labels import TASK_ARITY, parse_task
from refdx.numerics import (
    Adam,
    cross_entropy_batch,
    kaiming_uniform_init,
    l2_normalize,
    make_rng,
    relu,
    softmax,
)
from refdx.retrieval import DEFAULT_K, top_k

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
N_MODALITIES = 4
MODALITY_FLAGS = ("drop_image", "drop_abn", "drop_dx", "drop_desc")


@dataclass(frozen=True)
class AblationMask:
    drop_image: bool = False
    drop_abn: bool = False
    drop_dx: bool = False
    drop_desc: bool = False
    disable_similarity_weighting: bool = False
    disable_attention: bool = False
    # overrides every other flag: the head sees only the query
    drop_all_evidence: bool = False

    @classmethod
    def named(cls, name):
        try:
            return cls(**_PRESETS[name])
        except KeyError:
            raise ConfigError(f"unknown ablation variant {name!r}; choose from {sorted(_PRESETS)}") from None

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ablation flags {sorted(unknown)}")
        return cls(**{k: bool(v) for k, v in d.items()})

    def to_dict(self):
        return asdict(self)

    @property
    def kept_modalities(self):
        return np.array([not getattr(self, f) for f in MODALITY_FLAGS])


_PRESETS = {
    "full": {},
    "no_evidence": {"drop_all_evidence": True},
    "no_image": {"drop_image": True},
    "no_abn": {"drop_abn": True},
    "no_dx": {"drop_dx": True},
    "no_desc": {"drop_desc": True},
    "no_similarity": {"disable_similarity_weighting": True},
    "no_attention": {"disable_attention": True},
}
VARIANT_NAMES = tuple(_PRESETS)


class EvidenceModel:
    """Parameters of the evidence encoder and inference head for one task."""

    def __init__(self, params, dim, n_classes, k=DEFAULT_K, hidden=256, mask=None, task=None):
        self.params = params
        self.dim = int(dim)
        self.n_classes = int(n_classes)
        self.k = int(k)
        self.hidden = int(hidden)
        self.mask = mask or AblationMask()
        self.task = parse_task(task) if task is not None else None
        self._check_shapes()

    @property
    def mlp_in(self):
        if self.mask.disable_attention and not self.mask.drop_all_evidence:
            return self.dim + self.k * self.dim
        return 2 * self.dim

    def _check_shapes(self):
        D, H, C = self.dim, self.hidden, self.n_classes
        expected = {
            "W1": (2 * N_MODALITIES * D, D), "b1": (D,), "W_proj": (D, D), "W_q": (D, D),
            "A1": (self.mlp_in, H), "c1": (H,), "A2": (H, C), "c2": (C,),
        }
        for name, shape in expected.items():
            if name not in self.params:
                raise ConfigError(f"missing parameter {name}")
            if self.params[name].shape != shape:
                raise ShapeError(f"{name} has shape {self.params[name].shape}, expected {shape}")
        if self.task is not None and TASK_ARITY[self.task] != C:
            raise ConfigError(f"task {self.task.value} has {TASK_ARITY[self.task]} classes, head outputs {C}")

    @classmethod
    def init(cls, dim, n_classes, rng, k=DEFAULT_K, hidden=256, mask=None, task=None):
        """Kaiming-uniform weights, zero biases."""
        mask = mask or AblationMask()
        D = dim
        mlp_in = D + k * D if (mask.disable_attention and not mask.drop_all_evidence) else 2 * D
        params = {
            "W1": kaiming_uniform_init(2 * N_MODALITIES * D, (2 * N_MODALITIES * D, D), rng),
            "b1": np.zeros(D),
            "W_proj": kaiming_uniform_init(D, (D, D), rng),
            "W_q": kaiming_uniform_init(D, (D, D), rng),
            "A1": kaiming_uniform_init(mlp_in, (mlp_in, hidden), rng),
            "c1": np.zeros(hidden),
            "A2": kaiming_uniform_init(hidden, (hidden, n_classes), rng),
            "c2": np.zeros(n_classes),
        }
        return cls(params, dim, n_classes, k, hidden, mask, task)

    def copy(self):
        return copy.deepcopy(self)

    def to_dict(self):
        return {
            "version": CHECKPOINT_VERSION,
            "task": self.task.value if self.task else None,
            "dim": self.dim,
            "n_classes": self.n_classes,
            "k": self.k,
            "hidden": self.hidden,
            "ablation_mask": self.mask.to_dict(),
            "params": {name: p.tolist() for name, p in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported head checkpoint version {d.get('version')!r}")
        params = {name: np.array(v, dtype=np.float64) for name, v in d["params"].items()}
        return cls(params, d["dim"], d["n_classes"], d["k"], d["hidden"],
                   AblationMask.from_dict(d["ablation_mask"]), d.get("task"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# --- batched forward / backward ------------------------------------------

def _masked_inputs(Z, S, mask):
    B, k, _ = Z.shape
    D = Z.shape[2] // N_MODALITIES
    keep = np.repeat(mask.kept_modalities, D).astype(np.float64)
    Z = Z * keep
    if mask.disable_similarity_weighting:
        S = np.ones_like(S)
    return np.concatenate([Z, S[..., None] * Z], axis=2)


def forward(model, Q, Z, S):
    """Batched forward pass.

    ``Q`` is (B, D) queries, ``Z`` (B, k, 4D) reference modalities, ``S``
    (B, k) retrieval similarities. Returns ``(logits, alpha, cache)``.
    """
    p, mask = model.params, model.mask
    B, k = S.shape
    D = model.dim
    cache = {"Q": Q}
    if mask.drop_all_evidence:
        u = np.concatenate([Q, np.zeros((B, D))], axis=1)
        alpha = np.full((B, k), 1.0 / k) if k else np.zeros((B, 0))
    else:
        X = _masked_inputs(Z, S, mask)
        P1 = X @ p["W1"] + p["b1"]
        Hd = relu(P1)
        E = Hd @ p["W_proj"]
        cache.update(X=X, P1=P1, Hd=Hd, E=E)
        if mask.disable_attention:
            if k != model.k:
                raise ConfigError(f"concatenation head expects exactly {model.k} evidence rows, got {k}")
            u = np.concatenate([Q, E.reshape(B, k * D)], axis=1)
            alpha = np.full((B, k), 1.0 / k)
        else:
            qv = Q @ p["W_q"]
            scores = np.einsum("bkd,bd->bk", E, qv)
            alpha = softmax(scores, axis=1)
            e_bar = np.einsum("bk,bkd->bd", alpha, E)
            u = np.concatenate([Q, e_bar], axis=1)
            cache.update(qv=qv)
    P2 = u @ p["A1"] + p["c1"]
    H2 = relu(P2)
    logits = H2 @ p["A2"] + p["c2"]
    cache.update(u=u, P2=P2, H2=H2, alpha=alpha)
    return logits, alpha, cache


def backward(model, cache, d_logits):
    p, mask = model.params, model.mask
    D = model.dim
    grads = {name: np.zeros_like(v) for name, v in p.items()}
    grads["A2"] = cache["H2"].T @ d_logits
    grads["c2"] = d_logits.sum(axis=0)
    d_P2 = (d_logits @ p["A2"].T) * (cache["P2"] > 0.0)
    grads["A1"] = cache["u"].T @ d_P2
    grads["c1"] = d_P2.sum(axis=0)
    if mask.drop_all_evidence:
        return grads
    d_u = d_P2 @ p["A1"].T
    E, alpha = cache["E"], cache["alpha"]
    B, k, _ = E.shape
    if mask.disable_attention:
        d_E = d_u[:, D:].reshape(B, k, D)
    else:
        d_ebar = d_u[:, D:]
        d_E = alpha[..., None] * d_ebar[:, None, :]
        d_alpha = np.einsum("bkd,bd->bk", E, d_ebar)
        d_scores = alpha * (d_alpha - (alpha * d_alpha).sum(axis=1, keepdims=True))
        d_E += d_scores[..., None] * cache["qv"][:, None, :]
        d_qv = np.einsum("bk,bkd->bd", d_scores, E)
        grads["W_q"] = cache["Q"].T @ d_qv
    Hd = cache["Hd"]
    grads["W_proj"] = Hd.reshape(-1, D).T @ d_E.reshape(-1, D)
    d_P1 = (d_E @ p["W_proj"].T) * (cache["P1"] > 0.0)
    X = cache["X"]
    grads["W1"] = X.reshape(-1, X.shape[2]).T @ d_P1.reshape(-1, D)
    grads["b1"] = d_P1.sum(axis=(0, 1))
    return grads


def loss_and_grads(model, Q, Z, S, y):
    logits, _, cache = forward(model, Q, Z, S)
    loss, d_logits = cross_entropy_batch(logits, y)
    return loss, backward(model, cache, d_logits)


# --- single-query operations ---------------------------------------------

def _check_dim(vec, dim, what):
    if vec.shape[-1] != dim:
        raise ShapeError(f"{what} has dim {vec.shape[-1]}, model dim {dim}")


def _project(Z, S, model, mask):
    X = _masked_inputs(Z, S, mask)
    p = model.params
    return relu(X @ p["W1"] + p["b1"]) @ p["W_proj"]


def build_evidence_vector(ref, sim, model, mask=None):
    """Projected evidence vector of one reference case at retrieval similarity ``sim``."""
    mask = model.mask if mask is None else mask
    _check_dim(ref.image, model.dim, f"case {ref.id}")
    if not np.isfinite(sim):
        raise DomainError("similarity must be finite")
    z = np.concatenate(ref.modalities())
    return _project(z[None, None, :], np.array([[float(sim)]]), model, mask)[0, 0]


def build_evidence_matrix(hits, corpus, model, mask=None):
    """Stack of evidence vectors, row ``i`` for hit rank ``i + 1``."""
    if not hits:
        raise DomainError("at least one retrieval hit is required")
    return np.stack([build_evidence_vector(corpus.get(h.case_id), h.sim, model, mask) for h in hits])


def attend(query, E, model):
    """Dot-product attention of the projected query over evidence rows.

    Returns ``(alpha, e_bar)`` with ``e_bar = alpha @ E``.
    """
    E = np.atleast_2d(np.asarray(E, dtype=np.float64))
    if E.shape[0] == 0:
        raise DomainError("attention over an empty evidence matrix")
    q = np.asarray(query, dtype=np.float64)
    _check_dim(q, model.dim, "query")
    _check_dim(E, model.dim, "evidence matrix")
    alpha = softmax(E @ (q @ model.params["W_q"]))
    return alpha, alpha @ E


def predict(query, E, model):
    """Logits, class probabilities and attention weights for one query.

    ``E`` is the evidence matrix; with ``drop_all_evidence`` it is ignored.
    """
    mask, p = model.mask, model.params
    q = np.asarray(query, dtype=np.float64)
    _check_dim(q, model.dim, "query")
    E = np.atleast_2d(np.asarray(E, dtype=np.float64))
    k = E.shape[0]
    if mask.drop_all_evidence:
        u = np.concatenate([q, np.zeros(model.dim)])
        alpha = np.full(k, 1.0 / k) if k else np.zeros(0)
    elif mask.disable_attention:
        if k != model.k:
            raise ConfigError(f"concatenation head expects exactly {model.k} evidence rows, got {k}")
        u = np.concatenate([q, E.ravel()])
        alpha = np.full(k, 1.0 / k)
    else:
        alpha, e_bar = attend(q, E, model)
        u = np.concatenate([q, e_bar])
    logits = relu(u @ p["A1"] + p["c1"]) @ p["A2"] + p["c2"]
    return logits, softmax(logits), alpha


def predict_query(query, references, model, exclude=()):
    """Retrieve, build evidence, attend and classify one query embedding.

    Query and reference modalities are L2-normalized as in
    :func:`prepare_examples`, so a head behaves the same here as in training.
    Returns ``(hits, logits, probs, alpha)``.
    """
    hits = top_k(query, references, model.k, exclude=exclude)
    if len(hits) != model.k:
        raise DomainError(f"head expects {model.k} references, retrieved {len(hits)}")
    refs = [references.get(h.case_id) for h in hits]
    Z = l2_normalize(np.stack([np.stack(r.modalities()) for r in refs])).reshape(1, len(refs), -1)
    S = np.array([[h.sim for h in hits]])
    E = _project(Z, S, model, model.mask)[0]
    logits, probs, alpha = predict(l2_normalize(query), E, model)
    return hits, logits, probs, alpha


# --- datasets and training ------------------------------------------------

@dataclass
class EvidenceExamples:
    """Pre-retrieved inputs for a set of queries (embeddings L2-normalized)."""

    ids: list
    Q: np.ndarray
    Z: np.ndarray
    S: np.ndarray
    y: np.ndarray
    hit_ids: list = field(default_factory=list)

    def __len__(self):
        return self.Q.shape[0]

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return EvidenceExamples([self.ids[i] for i in idx], self.Q[idx], self.Z[idx], self.S[idx],
                                self.y[idx], [self.hit_ids[i] for i in idx] if self.hit_ids else [])


def _normalized_modalities(corpus):
    stacked = np.concatenate([corpus.images[:, None, :], corpus.texts], axis=1)
    return l2_normalize(stacked).reshape(len(corpus), N_MODALITIES * corpus.dim)


def prepare_examples(queries, references, task, k=DEFAULT_K, leave_one_out=False):
    """Retrieve top-k references for every query case and stack head inputs.

    With ``leave_one_out`` a query never retrieves the reference sharing its id.
    """
    task = parse_task(task)
    if len(references) < k + (1 if leave_one_out else 0):
        raise DomainError(f"need at least {k} references per query, corpus has {len(references)}")
    ref_z = _normalized_modalities(references)
    n = len(queries)
    Q = l2_normalize(queries.images) if n else np.zeros((0, queries.dim))
    Z = np.zeros((n, k, N_MODALITIES * references.dim))
    S = np.zeros((n, k))
    hit_ids = []
    for i, case in enumerate(queries.cases):
        exclude = (case.id,) if leave_one_out and case.id in references else ()
        hits = top_k(case.image, references, k, exclude=exclude)
        rows = [h.index for h in hits]
        Z[i] = ref_z[rows]
        S[i] = [h.sim for h in hits]
        hit_ids.append([h.case_id for h in hits])
    return EvidenceExamples([c.id for c in queries.cases], Q, Z, S, queries.labels(task), hit_ids)


@dataclass
class HeadConfig:
    lr: float = 5e-5
    batch_size: int = 4
    max_epochs: int = 100
    patience: int = 5
    hidden: int = 256
    k: int = DEFAULT_K
    seed: int = 0

    def validate(self):
        if self.lr < 0:
            raise DomainError("lr must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise DomainError("batch_size, max_epochs and patience must be positive")
        if self.hidden < 1 or self.k < 1:
            raise DomainError("hidden and k must be positive")


def evaluate_loss(model, ex):
    logits, _, _ = forward(model, ex.Q, ex.Z, ex.S)
    return cross_entropy_batch(logits, ex.y)[0]


def predict_examples(model, ex):
    """Returns ``(predicted indices, probs, alpha)`` for every example."""
    logits, alpha, _ = forward(model, ex.Q, ex.Z, ex.S)
    probs = softmax(logits, axis=1)
    return np.argmax(logits, axis=1), probs, alpha


def train_head(train, val, task, config, mask=None):
    """Joint Adam training of evidence encoder and head with early stopping.

    Validation loss is recorded before the first update (epoch 0) and after
    every epoch; training stops once it has not improved for ``patience``
    consecutive epochs, and the best-validation parameters are returned.
    """
    config.validate()
    task = parse_task(task)
    if len(train) == 0 or len(val) == 0:
        raise DomainError("train and validation sets must be non-empty")
    n_classes = TASK_ARITY[task]
    for ex in (train, val):
        if ex.y.min() < 0 or ex.y.max() >= n_classes:
            raise DomainError("labels outside the task arity")
    if train.Z.shape[1] != config.k:
        raise ConfigError(f"examples carry {train.Z.shape[1]} references, config k={config.k}")
    if len(np.unique(train.y)) < 2:
        warnings.warn("training set contains a single class", stacklevel=2)

    rng = make_rng(config.seed)
    model = EvidenceModel.init(train.Q.shape[1], n_classes, rng, config.k, config.hidden, mask, task)
    opt = Adam(model.params, lr=config.lr)

    best_loss = evaluate_loss(model, val)
    best_params = {name: v.copy() for name, v in model.params.items()}
    history = {"val_loss": [best_loss], "train_loss": [], "best_epoch": 0, "stopped_early": False}
    wait = 0
    n = len(train)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            b = order[start:start + config.batch_size]
            loss, grads = loss_and_grads(model, train.Q[b], train.Z[b], train.S[b], train.y[b])
            opt.step(grads)
            total += loss * len(b)
        history["train_loss"].append(total / n)
        val_loss = evaluate_loss(model, val)
        history["val_loss"].append(val_loss)
        if val_loss < best_loss:
            best_loss, wait = val_loss, 0
            history["best_epoch"] = epoch
            best_params = {name: v.copy() for name, v in model.params.items()}
        else:
            wait += 1
        log.debug("head epoch %d train %.5f val %.5f", epoch, history["train_loss"][-1], val_loss)
        if wait >= config.patience:
            history["stopped_early"] = True
            break
    history["epochs_run"] = len(history["train_loss"])
    for name, v in best_params.items():
        model.params[name][...] = v
    return model, history
