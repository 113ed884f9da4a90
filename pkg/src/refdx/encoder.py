"""Embedding providers: pass-through for precomputed vectors and a toy dual encoder.

The toy encoder is a pair of affine projection heads followed by L2
normalization, trained with the symmetric InfoNCE objective. Text enters it
as hashed token counts, so no tokenizer is needed.
"""

import json
import logging
import re
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from refdx.corpus import AnchorSet, Corpus, ReferenceCase
from refdx.errors import ConfigError, DomainError, NumericError, ShapeError
from refdx.labels import (
    ABNORMALITY_TEMPLATES,
    DEMENTIA_TEMPLATES,
    TASK_CLASSES,
    TASK_TEMPLATES,
    combined_text,
)
from refdx.numerics import Adam, ensure_finite, kaiming_uniform_init, log_softmax, make_rng, softmax

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_TOKEN = re.compile(r"[a-z0-9']+")


def text_features(text, feat_dim=64):
    """Hashed bag-of-words counts (crc32 buckets) of ``text``."""
    feats = np.zeros(feat_dim)
    for tok in _TOKEN.findall(text.lower()):
        feats[zlib.crc32(tok.encode("utf-8")) % feat_dim] += 1.0
    return feats


class PassThroughEncoder:
    """Identity provider for embeddings computed elsewhere."""

    name = "passthrough"

    def embed_image(self, raw):
        return np.asarray(raw, dtype=np.float64)

    def embed_text(self, feat):
        return np.asarray(feat, dtype=np.float64)

    def encode_corpus(self, corpus):
        return corpus


def _normalize_rows(pre):
    norms = np.sqrt((pre * pre).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise NumericError("projection produced a zero vector; cannot normalize")
    return pre / norms, norms


def _normalize_backward(dy, y, norms):
    # d(u/|u|) = (dy - y (y.dy)) / |u|
    return (dy - y * (y * dy).sum(axis=1, keepdims=True)) / norms


class ToyDualEncoder:
    """Affine image and text projection heads into a shared, unit-norm latent space."""

    name = "toy"

    def __init__(self, W_img, b_img, W_txt, b_txt, tau=0.07):
        self.W_img = np.array(W_img, dtype=np.float64)
        self.b_img = np.array(b_img, dtype=np.float64)
        self.W_txt = np.array(W_txt, dtype=np.float64)
        self.b_txt = np.array(b_txt, dtype=np.float64)
        self.tau = float(tau)
        if not self.tau > 0:
            raise DomainError("temperature must be positive")
        if self.W_img.shape[1] != self.W_txt.shape[1]:
            raise ShapeError("image and text heads must share the latent dimension")
        if self.b_img.shape != (self.dim,) or self.b_txt.shape != (self.dim,):
            raise ShapeError("bias length must equal the latent dimension")

    @classmethod
    def init(cls, raw_dim, feat_dim, dim, rng, tau=0.07, scale=1.0):
        """Kaiming-uniform weights shrunk by ``scale``, zero biases."""
        return cls(
            scale * kaiming_uniform_init(raw_dim, (raw_dim, dim), rng),
            np.zeros(dim),
            scale * kaiming_uniform_init(feat_dim, (feat_dim, dim), rng),
            np.zeros(dim),
            tau,
        )

    @property
    def raw_dim(self):
        return self.W_img.shape[0]

    @property
    def feat_dim(self):
        return self.W_txt.shape[0]

    @property
    def dim(self):
        return self.W_img.shape[1]

    def params(self):
        return {"W_img": self.W_img, "b_img": self.b_img, "W_txt": self.W_txt, "b_txt": self.b_txt}

    def embed_images(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.raw_dim:
            raise ShapeError(f"image features need length {self.raw_dim}, got {X.shape[1]}")
        return _normalize_rows(X @ self.W_img + self.b_img)[0]

    def embed_texts(self, F):
        F = np.atleast_2d(np.asarray(F, dtype=np.float64))
        if F.shape[1] != self.feat_dim:
            raise ShapeError(f"text features need length {self.feat_dim}, got {F.shape[1]}")
        return _normalize_rows(F @ self.W_txt + self.b_txt)[0]

    def embed_image(self, raw):
        return self.embed_images(np.asarray(raw)[None, :])[0]

    def embed_text(self, feat):
        return self.embed_texts(np.asarray(feat)[None, :])[0]

    def embed_strings(self, texts):
        return self.embed_texts(np.stack([text_features(t, self.feat_dim) for t in texts]))

    def anchor_sets(self):
        """Anchors for every anchored task, embedded from the template sentences."""
        out = {}
        for task, templates in TASK_TEMPLATES.items():
            classes = TASK_CLASSES[task]
            out[task] = AnchorSet(task, classes, self.embed_strings([templates[c] for c in classes]))
        return out

    def encode_corpus(self, corpus):
        """Re-embed a corpus whose image rows are raw image features for this encoder."""
        images = self.embed_images(corpus.images) if len(corpus) else np.zeros((0, self.dim))
        cases = []
        for i, case in enumerate(corpus.cases):
            abn, dx, desc = self.embed_strings([
                ABNORMALITY_TEMPLATES[case.abnormality],
                DEMENTIA_TEMPLATES[case.dementia],
                case.description or combined_text(case.abnormality, case.dementia),
            ])
            cases.append(ReferenceCase(case.id, images[i], abn, dx, desc, case.abnormality,
                                       case.dementia, case.description, case.severity))
        return Corpus(cases, self.dim, self.anchor_sets(), corpus.provenance)

    def to_dict(self):
        return {
            "version": CHECKPOINT_VERSION,
            "raw_dim": self.raw_dim,
            "feat_dim": self.feat_dim,
            "dim": self.dim,
            "tau": self.tau,
            "W_img": self.W_img.tolist(),
            "b_img": self.b_img.tolist(),
            "W_txt": self.W_txt.tolist(),
            "b_txt": self.b_txt.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported encoder checkpoint version {d.get('version')!r}")
        enc = cls(d["W_img"], d["b_img"], d["W_txt"], d["b_txt"], d["tau"])
        if (enc.raw_dim, enc.feat_dim, enc.dim) != (d["raw_dim"], d["feat_dim"], d["dim"]):
            raise ShapeError("checkpoint dimensions disagree with its weight arrays")
        return enc

    def save(self, path):
        # float repr is the shortest string that round-trips binary64 exactly
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def contrastive_loss(X_img, X_txt, encoder, symmetric=True):
    """InfoNCE over a batch of matched rows; returns ``(loss, grads)``.

    ``symmetric`` averages the image->text and text->image directions;
    otherwise only image->text is used.
    """
    X_img = np.atleast_2d(np.asarray(X_img, dtype=np.float64))
    X_txt = np.atleast_2d(np.asarray(X_txt, dtype=np.float64))
    n = X_img.shape[0]
    if n < 1 or X_txt.shape[0] != n:
        raise ShapeError("a batch needs N >= 1 aligned image/text rows")
    v, v_norm = _normalize_rows(X_img @ encoder.W_img + encoder.b_img)
    t, t_norm = _normalize_rows(X_txt @ encoder.W_txt + encoder.b_txt)
    S = (v @ t.T) / encoder.tau
    ensure_finite(S, "similarity logits")
    diag = np.arange(n)

    loss_i2t = -log_softmax(S, axis=1)[diag, diag].mean()
    d_S = softmax(S, axis=1)
    d_S[diag, diag] -= 1.0
    d_S /= n
    if symmetric:
        loss_t2i = -log_softmax(S, axis=0)[diag, diag].mean()
        d_col = softmax(S, axis=0)
        d_col[diag, diag] -= 1.0
        loss = 0.5 * (loss_i2t + loss_t2i)
        d_S = 0.5 * (d_S + d_col / n)
    else:
        loss = loss_i2t
    ensure_finite(loss, "contrastive loss")

    d_v = d_S @ t / encoder.tau
    d_t = d_S.T @ v / encoder.tau
    d_pre_v = _normalize_backward(d_v, v, v_norm)
    d_pre_t = _normalize_backward(d_t, t, t_norm)
    grads = {
        "W_img": X_img.T @ d_pre_v,
        "b_img": d_pre_v.sum(axis=0),
        "W_txt": X_txt.T @ d_pre_t,
        "b_txt": d_pre_t.sum(axis=0),
    }
    return float(loss), grads


@dataclass
class EncoderConfig:
    dim: int = 512
    tau: float = 0.07
    lr: float = 5e-5
    batch_size: int = 16
    epochs: int = 10
    weight_decay: float = 0.2
    symmetric: bool = True
    # small init lets lr-sized Adam steps dominate the random starting directions
    init_scale: float = 0.01
    seed: int = 0

    def validate(self):
        if self.dim < 1:
            raise DomainError("latent dim must be positive")
        if not self.tau > 0:
            raise DomainError("tau must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise DomainError("lr and weight_decay must be non-negative")
        if not self.init_scale > 0:
            raise DomainError("init_scale must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise DomainError("batch_size and epochs must be positive")


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_contrastive(X_img, X_txt, config, encoder=None):
    """Train (or fine-tune) a toy dual encoder with AdamW on aligned pairs.

    Returns ``(encoder, history)``; ``history["initial_loss"]`` is the mean
    batch loss of the first epoch's batching before any update.
    """
    config.validate()
    X_img = np.asarray(X_img, dtype=np.float64)
    X_txt = np.asarray(X_txt, dtype=np.float64)
    n = X_img.shape[0]
    if n < 2 or X_txt.shape[0] != n:
        raise DomainError("contrastive training needs at least 2 aligned pairs")
    rng = make_rng(config.seed)
    if encoder is None:
        encoder = ToyDualEncoder.init(X_img.shape[1], X_txt.shape[1], config.dim, rng,
                                      config.tau, config.init_scale)
    opt = Adam(encoder.params(), lr=config.lr, weight_decay=config.weight_decay)

    history = {"config": asdict(config), "epoch_losses": []}
    for epoch in range(config.epochs):
        batches = _batches(n, config.batch_size, rng)
        if epoch == 0:
            history["initial_loss"] = float(np.mean([
                contrastive_loss(X_img[b], X_txt[b], encoder, config.symmetric)[0] for b in batches]))
        losses = []
        for b in batches:
            loss, grads = contrastive_loss(X_img[b], X_txt[b], encoder, config.symmetric)
            opt.step(grads)
            losses.append(loss)
        history["epoch_losses"].append(float(np.mean(losses)))
        log.info("encoder epoch %d loss %.6f", epoch + 1, history["epoch_losses"][-1])
    return encoder, history


def pairs_from_corpus(corpus, modalities=("abnormality",), feat_dim=64):
    """Image rows paired with hashed pseudo-text features.

    ``modalities`` picks any of "description", "abnormality", "dementia",
    "combined"; each case contributes one pair per modality.
    """
    X_img, X_txt = [], []
    for case in corpus.cases:
        for m in modalities:
            if m == "abnormality":
                text = ABNORMALITY_TEMPLATES[case.abnormality]
            elif m == "dementia":
                text = DEMENTIA_TEMPLATES[case.dementia]
            elif m == "combined":
                text = combined_text(case.abnormality, case.dementia)
            elif m == "description":
                text = case.description
            else:
                raise DomainError(f"unknown text modality {m!r}")
            X_img.append(case.image)
            X_txt.append(text_features(text, feat_dim))
    return np.array(X_img).reshape(-1, corpus.dim), np.array(X_txt).reshape(-1, feat_dim)


def matched_text_accuracy(encoder, X_img, X_txt):
    """Top-1 image->text retrieval accuracy among the given texts.

    A hit is any text whose features equal the image's own paired text.
    """
    v = encoder.embed_images(X_img)
    t = encoder.embed_texts(X_txt)
    best = np.argmax(v @ t.T, axis=1)
    return float(np.mean([np.array_equal(X_txt[j], X_txt[i]) for i, j in enumerate(best)]))
