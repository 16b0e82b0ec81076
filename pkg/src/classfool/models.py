"""Victim classifiers: small softmax networks with exact input gradients.

The two builtin victims are a two-layer dense network and a small
convolutional network for single-channel square images. Both follow the
scikit-learn estimator API and additionally expose per-sample gradients of
the cross-entropy loss with respect to the *input*, which is what the
attack consumes. There is no autodiff: each layer implements its own
backward pass, so gradients are exact for the forward definition.
"""

from __future__ import annotations

import hashlib

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .container import load_container, save_container
from .data import SampleBatch
from .exceptions import (NumericError, ShapeError, TrainingError,
                         ValidationError)
from .validation import check_label, check_labels, check_matrix, check_value_range

PROB_FLOOR = 1e-12

CHECKPOINT_KIND = "classfool-checkpoint"
CHECKPOINT_VERSION = 1


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _row_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-row a @ b with row-position-independent rounding.

    A plain GEMM routes trailing rows through BLAS remainder kernels whose
    rounding differs from the blocked path, so identical samples at
    different batch positions can produce bit-different outputs. Batching
    one GEMM per row keeps every row on the same code path.
    """
    return np.matmul(a[:, None, :], b)[:, 0, :]


def cross_entropy(probabilities, label: int) -> float:
    """-log p(label), floored at -log(1e-12) to stay finite."""
    p = np.asarray(probabilities, dtype=np.float64)
    label = check_label(label, p.shape[-1])
    return float(-np.log(max(p[label], PROB_FLOOR)))


def _ce_rows(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    picked = probs[np.arange(probs.shape[0]), labels]
    return -np.log(np.maximum(picked, PROB_FLOOR))


class _Scale:
    """Fixed multiplicative input scaling (no trainable parameters).

    Folding the value-range normalization into the first layer keeps the
    training dynamics identical across value ranges while the network still
    consumes raw, unpreprocessed inputs.
    """

    params = ()

    def __init__(self, factor: float):
        self.factor = factor

    def forward(self, x):
        return x * self.factor, None

    def backward(self, grad, cache, need_params):
        return grad * self.factor, ()


class _Dense:
    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w = w
        self.b = b

    @property
    def params(self):
        return (self.w, self.b)

    def forward(self, x):
        return _row_matmul(x, self.w) + self.b, x

    def backward(self, grad, cache, need_params):
        x = cache
        grads = (x.T @ grad, grad.sum(axis=0)) if need_params else ()
        return _row_matmul(grad, self.w.T), grads


class _ReLU:
    params = ()

    def forward(self, x):
        return np.maximum(x, 0.0), x > 0.0

    def backward(self, grad, cache, need_params):
        return grad * cache, ()


class _ToImage:
    """[n, d] -> [n, c, h, w] reshape."""

    params = ()

    def __init__(self, channels, height, width):
        self.shape = (channels, height, width)

    def forward(self, x):
        return x.reshape(x.shape[0], *self.shape), None

    def backward(self, grad, cache, need_params):
        return grad.reshape(grad.shape[0], -1), ()


class _Flatten:
    params = ()

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, cache, need_params):
        return grad.reshape(cache), ()


class _Conv2d:
    """Valid-padding stride-1 convolution via im2col."""

    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w = w  # [out_c, in_c, kh, kw]
        self.b = b

    @property
    def params(self):
        return (self.w, self.b)

    def forward(self, x):
        n, ic, h, w = x.shape
        oc, _, kh, kw = self.w.shape
        ho, wo = h - kh + 1, w - kw + 1
        win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, ic * kh * kw)
        out = cols @ self.w.reshape(oc, -1).T + self.b
        out = out.transpose(0, 2, 1).reshape(n, oc, ho, wo)
        return out, (x.shape, cols)

    def backward(self, grad, cache, need_params):
        (n, ic, h, w), cols = cache
        oc, _, kh, kw = self.w.shape
        ho, wo = h - kh + 1, w - kw + 1
        g = grad.reshape(n, oc, ho * wo).transpose(0, 2, 1)
        if need_params:
            dw = np.einsum("npo,npk->ok", g, cols).reshape(self.w.shape)
            db = g.sum(axis=(0, 1))
            grads = (dw, db)
        else:
            grads = ()
        dcols = (g @ self.w.reshape(oc, -1)).reshape(n, ho, wo, ic, kh, kw)
        dx = np.zeros((n, ic, h, w))
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx, grads


class _AvgPool2d:
    """2x2 average pooling, stride 2; spatial dims must be even."""

    params = ()

    def forward(self, x):
        n, c, h, w = x.shape
        out = x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
        return out, None

    def backward(self, grad, cache, need_params):
        return np.repeat(np.repeat(grad, 2, axis=2), 2, axis=3) / 4.0, ()


class _SoftmaxNetMixin:
    """Forward/backward machinery shared by the builtin victims.

    Subclasses implement ``_build_layers(rng, n_features, n_classes)`` and
    define the usual scikit-learn ``__init__`` hyperparameters, including
    ``epochs``, ``lr``, ``batch_size``, ``seed`` and ``value_range``.
    Parameters are only written during ``fit``; attacks treat them as
    read-only.
    """

    def _input_scale(self) -> float:
        lo, hi = check_value_range(self.value_range)
        return max(1.0, abs(lo), abs(hi))

    def _check_input(self, X) -> np.ndarray:
        X = check_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(
                f"model expects {self.n_features_in_} features, got {X.shape[1]}")
        return X

    def _forward(self, X):
        caches = []
        out = X
        for layer in self.layers_:
            out, cache = layer.forward(out)
            caches.append(cache)
        return softmax(out), caches

    def _backward(self, grad, caches, need_params):
        param_grads = []
        for layer, cache in zip(reversed(self.layers_), reversed(caches)):
            grad, pg = layer.backward(grad, cache, need_params)
            if need_params:
                param_grads.append((layer, pg))
        return grad, param_grads

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self)
        X = self._check_input(X)
        probs, _ = self._forward(X)
        return probs

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def loss(self, X, labels) -> np.ndarray:
        """Per-sample cross-entropy, floored at -log(1e-12)."""
        probs = self.predict_proba(X)
        labels = check_labels(np.atleast_1d(labels), probs.shape[0],
                              self.n_classes_)
        return _ce_rows(probs, labels)

    def input_gradients(self, X, labels) -> np.ndarray:
        """Per-sample d(cross-entropy)/d(input), one row per sample.

        ``labels`` may be an array (one label per row) or a single index
        applied to every row.
        """
        check_is_fitted(self)
        X = self._check_input(X)
        n = X.shape[0]
        labels = np.asarray(labels)
        if labels.ndim == 0:
            labels = np.full(n, int(labels))
        labels = check_labels(labels, n, self.n_classes_)
        probs, caches = self._forward(X)
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
        grad, _ = self._backward(grad, caches, need_params=False)
        if not np.isfinite(grad).all():
            raise NumericError("non-finite input gradient")
        return grad

    def input_gradient(self, sample, label: int) -> np.ndarray:
        sample = np.asarray(sample, dtype=np.float64).reshape(1, -1)
        return self.input_gradients(sample, int(label))[0]

    def fit(self, X, y):
        """Plain seeded mini-batch gradient descent on the cross-entropy."""
        X = check_matrix(X)
        y = check_labels(y, X.shape[0], name="y")
        n_classes = self.n_classes or int(y.max()) + 1
        y = check_labels(y, X.shape[0], n_classes, name="y")
        if np.unique(y).size < 2:
            raise ValidationError("training labels must cover at least 2 classes")
        rng = np.random.default_rng(self.seed)
        self.n_features_in_ = X.shape[1]
        self.n_classes_ = n_classes
        self.classes_ = np.arange(n_classes)
        self.layers_ = self._build_layers(rng, X.shape[1], n_classes)
        onehot = np.eye(n_classes)[y]
        n = X.shape[0]
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                probs, caches = self._forward(X[idx])
                grad = (probs - onehot[idx]) / idx.size
                _, param_grads = self._backward(grad, caches, need_params=True)
                for layer, grads in param_grads:
                    for p, g in zip(layer.params, grads):
                        p -= self.lr * g
        return self


class DenseClassifier(_SoftmaxNetMixin, ClassifierMixin, BaseEstimator):
    """Two-layer fully connected softmax classifier (d -> hidden -> K)."""

    def __init__(self, hidden=128, n_classes=None, epochs=30, lr=0.5,
                 batch_size=32, seed=0, value_range=(0.0, 255.0)):
        self.hidden = hidden
        self.n_classes = n_classes
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.value_range = value_range

    def _build_layers(self, rng, n_features, n_classes):
        w1 = rng.normal(size=(n_features, self.hidden)) / np.sqrt(n_features)
        w2 = rng.normal(size=(self.hidden, n_classes)) / np.sqrt(self.hidden)
        return [_Scale(1.0 / self._input_scale()),
                _Dense(w1, np.zeros(self.hidden)), _ReLU(),
                _Dense(w2, np.zeros(n_classes))]


class ConvClassifier(_SoftmaxNetMixin, ClassifierMixin, BaseEstimator):
    """Small convolutional softmax classifier for single-channel images.

    conv(k x k) -> ReLU -> 2x2 average pool -> dense. ``image_shape`` must
    multiply out to the flattened input dimension, and the post-convolution
    spatial dims must be even so the pool is exact.
    """

    def __init__(self, image_shape=(28, 28), n_filters=8, kernel_size=3,
                 n_classes=None, epochs=20, lr=0.05, batch_size=32, seed=0,
                 value_range=(0.0, 255.0)):
        self.image_shape = image_shape
        self.n_filters = n_filters
        self.kernel_size = kernel_size
        self.n_classes = n_classes
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.value_range = value_range

    def _build_layers(self, rng, n_features, n_classes):
        h, w = int(self.image_shape[0]), int(self.image_shape[1])
        if h * w != n_features:
            raise ShapeError(
                f"image_shape {h}x{w} does not match input dim {n_features}")
        k = int(self.kernel_size)
        ho, wo = h - k + 1, w - k + 1
        if ho < 2 or wo < 2 or ho % 2 or wo % 2:
            raise ValidationError(
                f"post-convolution dims {ho}x{wo} must be even and >= 2")
        wc = rng.normal(size=(self.n_filters, 1, k, k)) / k
        flat = self.n_filters * (ho // 2) * (wo // 2)
        wd = rng.normal(size=(flat, n_classes)) / np.sqrt(flat)
        return [_Scale(1.0 / self._input_scale()), _ToImage(1, h, w),
                _Conv2d(wc, np.zeros(self.n_filters)), _ReLU(), _AvgPool2d(),
                _Flatten(), _Dense(wd, np.zeros(n_classes))]


def finite_difference(fn, x, h: float) -> np.ndarray:
    """Central difference (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate."""
    if h <= 0:
        raise ValidationError("finite-difference step h must be > 0")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        hi = x.copy()
        lo = x.copy()
        hi[i] += h
        lo[i] -= h
        grad[i] = (fn(hi) - fn(lo)) / (2.0 * h)
    return grad


def finite_difference_gradient(model, sample, label: int, h: float = 1e-4
                               ) -> np.ndarray:
    """Central-difference gradient of the model loss w.r.t. one sample.

    All 2d probe points are evaluated as a single forward batch, which keeps
    the oracle cheap enough for property tests.
    """
    if h <= 0:
        raise ValidationError("finite-difference step h must be > 0")
    sample = np.asarray(sample, dtype=np.float64).ravel()
    d = sample.size
    probes = np.tile(sample, (2 * d, 1))
    rows = np.arange(d)
    probes[rows, rows] += h
    probes[d + rows, rows] -= h
    losses = model.loss(probes, np.full(2 * d, int(label)))
    return (losses[:d] - losses[d:]) / (2.0 * h)


def train_victim(batch: SampleBatch, model, holdout_fraction: float = 0.2,
                 accuracy_floor: float = 0.95, seed: int = 0):
    """Fit a victim on a seeded split and enforce a held-out accuracy floor.

    Raises TrainingError carrying the final accuracy if the model stays
    below ``accuracy_floor`` after its configured epoch budget.
    """
    if not 0.0 < holdout_fraction < 1.0:
        raise ValidationError("holdout_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    n = len(batch)
    order = rng.permutation(n)
    n_hold = max(1, int(round(n * holdout_fraction)))
    hold, train = order[:n_hold], order[n_hold:]
    model.fit(batch.data[train], batch.labels[train])
    accuracy = float(np.mean(model.predict(batch.data[hold]) == batch.labels[hold]))
    if accuracy < accuracy_floor:
        raise TrainingError(
            f"held-out accuracy {accuracy:.4f} below floor {accuracy_floor}",
            accuracy=accuracy)
    return model, accuracy


_ARCH_BY_NAME = {"dense": DenseClassifier, "conv": ConvClassifier}


def save_checkpoint(model, path: str) -> None:
    """Persist a fitted victim with its architecture, params and weights.

    Preprocessing is always "raw": the network consumes values straight from
    the declared range.
    """
    check_is_fitted(model)
    arch = next(name for name, cls in _ARCH_BY_NAME.items()
                if isinstance(model, cls))
    params = model.get_params()
    for key in ("value_range", "image_shape"):
        if key in params and isinstance(params[key], tuple):
            params[key] = list(params[key])
    arrays = {}
    for i, layer in enumerate(model.layers_):
        for j, p in enumerate(layer.params):
            arrays[f"layer{i}_p{j}"] = p
    meta = {
        "arch": arch,
        "params": params,
        "n_features": int(model.n_features_in_),
        "n_classes": int(model.n_classes_),
        "preprocessing": "raw",
        "train_seed": int(model.seed),
    }
    save_container(path, CHECKPOINT_KIND, CHECKPOINT_VERSION, meta, arrays)


def load_checkpoint(path: str):
    meta, arrays = load_container(path, CHECKPOINT_KIND, CHECKPOINT_VERSION)
    cls = _ARCH_BY_NAME[meta["arch"]]
    params = dict(meta["params"])
    for key in ("value_range", "image_shape"):
        if key in params and isinstance(params[key], list):
            params[key] = tuple(params[key])
    model = cls(**params)
    model.n_features_in_ = int(meta["n_features"])
    model.n_classes_ = int(meta["n_classes"])
    model.classes_ = np.arange(model.n_classes_)
    model.layers_ = model._build_layers(np.random.default_rng(0),
                                        model.n_features_in_, model.n_classes_)
    for i, layer in enumerate(model.layers_):
        for j, p in enumerate(layer.params):
            stored = arrays[f"layer{i}_p{j}"]
            if stored.shape != p.shape:
                raise ShapeError(
                    f"{path}: layer{i}_p{j} shape {stored.shape} != {p.shape}")
            p[...] = stored
    return model


def checkpoint_digest(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
