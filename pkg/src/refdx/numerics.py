"""Dense linear algebra, activations, losses, Adam and gradient checking.

Everything works on float64 numpy arrays. Layers expose hand-derived
backward passes; there is no autodiff graph.
"""

from dataclasses import dataclass, field

import numpy as np

from refdx import backend
from refdx.errors import DomainError, NumericError, ShapeError, StateError

ACTIVATIONS = ("relu", "none")


def make_rng(seed):
    """Deterministic generator (PCG64) for ``seed``."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_vector(x, name="vector"):
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {v.shape}")
    return v


def as_matrix(x, name="matrix"):
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def ensure_finite(x, what="value"):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite {what}")
    return x


def l2_normalize(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    if np.any(norms == 0.0):
        raise NumericError("cannot normalize a zero vector")
    return x / norms


def cosine_sim(u, v):
    u = as_vector(u, "u")
    v = as_vector(v, "v")
    if u.shape != v.shape or u.size == 0:
        raise ShapeError(f"cosine_sim needs equal non-empty lengths, got {u.size} and {v.size}")
    # same kernel as retrieval so the two agree bit for bit
    s = backend.cosine_scores(np.ascontiguousarray(u)[None, :], np.ascontiguousarray(v))[0]
    if np.isnan(s):
        raise DomainError("cosine similarity of a zero-norm vector")
    return float(s)


def cosine_matrix(a, b):
    """Pairwise cosine similarities between rows of ``a`` and rows of ``b``."""
    return l2_normalize(as_matrix(a)) @ l2_normalize(as_matrix(b)).T


def softmax(s, axis=-1):
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0 or s.shape[axis] == 0:
        raise ShapeError("softmax of an empty vector")
    ensure_finite(s, "softmax input")
    shifted = s - s.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(s, axis=-1):
    s = np.asarray(s, dtype=np.float64)
    shifted = s - s.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def relu(x):
    return np.maximum(x, 0.0)


@dataclass
class DenseCache:
    x: np.ndarray
    W: np.ndarray
    pre: np.ndarray
    activation: str


def dense_forward(x, W, b, activation="none", return_cache=False):
    """``act(x @ W + b)``; with ``return_cache`` also returns what backward needs."""
    if activation not in ACTIVATIONS:
        raise DomainError(f"unknown activation {activation!r}")
    x = as_matrix(x, "x")
    W = as_matrix(W, "W")
    b = as_vector(b, "b")
    if x.shape[1] != W.shape[0] or b.shape[0] != W.shape[1]:
        raise ShapeError(f"dense shapes disagree: x{x.shape} W{W.shape} b{b.shape}")
    pre = x @ W + b
    out = relu(pre) if activation == "relu" else pre
    if return_cache:
        return out, DenseCache(x, W, pre, activation)
    return out


def dense_backward(upstream, cache):
    """Gradients ``(grad_x, grad_W, grad_b)`` of a dense layer.

    The ReLU subgradient at exactly zero is taken as zero.
    """
    if cache is None:
        raise StateError("dense_backward called without a forward cache")
    g = as_matrix(upstream, "upstream")
    if g.shape != cache.pre.shape:
        raise ShapeError(f"upstream {g.shape} does not match layer output {cache.pre.shape}")
    if cache.activation == "relu":
        g = g * (cache.pre > 0.0)
    return g @ cache.W.T, cache.x.T @ g, g.sum(axis=0)


class Dense:
    """Affine layer with optional ReLU, holding its parameters and last cache."""

    def __init__(self, W, b, activation="none"):
        self.W = as_matrix(W, "W").copy()
        self.b = as_vector(b, "b").copy()
        self.activation = activation
        self._cache = None

    @classmethod
    def init(cls, fan_in, fan_out, rng, activation="none"):
        return cls(kaiming_uniform_init(fan_in, (fan_in, fan_out), rng), np.zeros(fan_out), activation)

    def forward(self, x):
        out, self._cache = dense_forward(x, self.W, self.b, self.activation, return_cache=True)
        return out

    def backward(self, upstream):
        return dense_backward(upstream, self._cache)


def cross_entropy(logits, true_class):
    """Loss ``-log softmax(logits)[true_class]`` and its gradient w.r.t. logits."""
    logits = as_vector(logits, "logits")
    if not 0 <= int(true_class) < logits.shape[0]:
        raise DomainError(f"class index {true_class} outside [0, {logits.shape[0]})")
    p = softmax(logits)
    loss = -log_softmax(logits)[int(true_class)]
    grad = p.copy()
    grad[int(true_class)] -= 1.0
    return float(loss), grad


def cross_entropy_batch(logits, labels):
    """Mean cross-entropy over rows and the gradient of that mean."""
    logits = as_matrix(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError("one label per row required")
    if n == 0 or labels.min() < 0 or labels.max() >= c:
        raise DomainError("label index out of range")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


@dataclass
class AdamState:
    shape: tuple
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.shape = tuple(self.shape)
        if self.m is None:
            self.m = np.zeros(self.shape)
        if self.v is None:
            self.v = np.zeros(self.shape)
        if self.m.shape != self.shape or self.v.shape != self.shape:
            raise ShapeError("moment estimates must match the parameter shape")
        if self.t < 0:
            raise DomainError("step count must be non-negative")


def adam_step(param, grad, state):
    """One in-place Adam update of ``param``; returns ``param``.

    A non-zero ``state.weight_decay`` applies decoupled decay (AdamW).
    """
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != state.shape or grad.shape != state.shape:
        raise ShapeError(f"adam shapes disagree: param {param.shape}, grad {grad.shape}, state {state.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    if state.weight_decay:
        param -= state.lr * state.weight_decay * param
    param -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return param


class Adam:
    """Adam over a dict of named parameter arrays, updated in place."""

    def __init__(self, params, lr=5e-5, beta1=0.9, beta2=0.999, epsilon=1e-8, weight_decay=0.0):
        self.params = params
        self.states = {
            name: AdamState(p.shape, lr, beta1, beta2, epsilon, weight_decay)
            for name, p in params.items()
        }

    def step(self, grads):
        for name, p in self.params.items():
            adam_step(p, grads[name], self.states[name])


def kaiming_uniform_bound(fan_in):
    if fan_in < 1:
        raise DomainError("fan_in must be at least 1")
    return float(np.sqrt(6.0 / fan_in))


def kaiming_uniform_init(fan_in, shape, rng):
    bound = kaiming_uniform_bound(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def numerical_gradient(f, x, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric):
    """``||a - n|| / max(||a||, ||n||)``; 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def check_gradients(loss_fn, params, analytic, h=1e-5):
    """Relative error per parameter between ``analytic`` grads and finite differences.

    ``loss_fn()`` must read the current contents of the arrays in ``params``.
    """
    return {
        name: relative_error(analytic[name], numerical_gradient(loss_fn, p, h))
        for name, p in params.items()
    }
