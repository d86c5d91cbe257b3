"""Single-hidden-layer feedforward classifier (tanh hidden, softmax output),
trained on mean cross-entropy with scaled conjugate gradient."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scg import ScgConfig, scg_minimize


@dataclass(frozen=True)
class ClassifierConfig:
    hidden: int = 100
    max_iter: int = 300
    grad_tol: float = 1e-6
    init_scale: float = 1.0  # multiplies the 1/sqrt(fan_in) weight initialisation

    def __post_init__(self):
        if self.hidden < 1:
            raise ValueError("hidden must be positive")
        if self.max_iter < 0:
            raise ValueError("max_iter must be nonnegative")


@dataclass(eq=False)
class MlpClassifier:
    w1: np.ndarray  # (hidden, n_in)
    b1: np.ndarray
    w2: np.ndarray  # (2, hidden)
    b2: np.ndarray
    mean: np.ndarray  # input standardisation, fitted on the training set
    std: np.ndarray
    trace: list = field(default_factory=list, repr=False)

    @classmethod
    def zeros(cls, n_in: int, hidden: int = 100) -> "MlpClassifier":
        return cls(np.zeros((hidden, n_in)), np.zeros(hidden), np.zeros((2, hidden)), np.zeros(2),
                   np.zeros(n_in), np.ones(n_in))

    @property
    def n_inputs(self) -> int:
        return self.w1.shape[1]

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("w1", "b1", "w2", "b2", "mean", "std")}


def _shapes(n_in, hidden):
    return [(hidden, n_in), (hidden,), (2, hidden), (2,)]


def _unpack(theta, n_in, hidden):
    out, o = [], 0
    for s in _shapes(n_in, hidden):
        n = int(np.prod(s))
        out.append(theta[o:o + n].reshape(s))
        o += n
    return out


def _log_softmax(logits):
    logits = logits - logits.max(axis=1, keepdims=True)
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


def loss_and_grad(theta, Xs, y, hidden):
    """Mean cross-entropy on standardised inputs and its gradient in packed layout."""
    n, n_in = Xs.shape
    w1, b1, w2, b2 = _unpack(theta, n_in, hidden)
    a = np.tanh(Xs @ w1.T + b1)
    logp = _log_softmax(a @ w2.T + b2)
    loss = -logp[np.arange(n), y].mean()
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    d /= n
    dw2 = d.T @ a
    db2 = d.sum(axis=0)
    dz = (d @ w2) * (1.0 - a ** 2)
    dw1 = dz.T @ Xs
    db1 = dz.sum(axis=0)
    return float(loss), np.concatenate([dw1.ravel(), db1, dw2.ravel(), db2])


def standardize_fit(X):
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)  # constant features pass through centred
    return mean, std


def train_classifier(X, y, seed: int, config: ClassifierConfig = ClassifierConfig()) -> MlpClassifier:
    """Fit every weight on (X, y); ``y`` holds 0 (healthy) / 1 (cancerous).

    Callers are expected to pass class-balanced data.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ValueError("X must be (n, d) with one label per row")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite classifier inputs")
    if not set(np.unique(y)) <= {0, 1}:
        raise ValueError("labels must be 0 or 1")
    n_in, hidden = X.shape[1], config.hidden
    mean, std = standardize_fit(X)
    Xs = (X - mean) / std
    rng = np.random.default_rng(seed)
    s = config.init_scale
    theta0 = np.concatenate([
        rng.normal(0.0, s / np.sqrt(n_in), hidden * n_in), np.zeros(hidden),
        rng.normal(0.0, s / np.sqrt(hidden), 2 * hidden), np.zeros(2),
    ])
    res = scg_minimize(lambda t: loss_and_grad(t, Xs, y, hidden), theta0,
                       ScgConfig(max_iter=config.max_iter, grad_tol=config.grad_tol))
    w1, b1, w2, b2 = (p.copy() for p in _unpack(res.x, n_in, hidden))
    return MlpClassifier(w1, b1, w2, b2, mean, std, res.trace)


def predict_proba(model: MlpClassifier, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.n_inputs:
        raise ValueError(f"expected {model.n_inputs} features, got {X.shape[1]}")
    a = np.tanh(((X - model.mean) / model.std) @ model.w1.T + model.b1)
    return np.exp(_log_softmax(a @ model.w2.T + model.b2))


def predict(model: MlpClassifier, sequence) -> tuple[int, np.ndarray]:
    """Label (argmax, ties to healthy) and the two class probabilities for one sequence."""
    p = predict_proba(model, sequence)[0]
    return int(p[1] > p[0]), p
