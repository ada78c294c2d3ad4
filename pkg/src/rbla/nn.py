"""Multilayer perceptron with softmax cross-entropy, backprop and plain SGD.

Layers follow a small protocol so that full dense layers and LoRA layers
(see :mod:`rbla.lora`) can be mixed in one :class:`MlpModel`:

* ``affine(x)`` returns the pre-activation ``x @ W_eff + b``;
* ``backprop(x, delta, need_dx)`` returns ``(grads, dx)`` where ``grads`` maps
  trainable parameter names to gradients;
* ``params()`` maps the same names to the arrays updated in place by SGD.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import ShapeError, SeededRng, as_matrix, rng_normal

RELU = "relu"
SOFTMAX = "softmax"
N_CLASSES = 10
INPUT_DIM = 784
HIDDEN = (200, 200)


@dataclass
class DenseLayer:
    W: np.ndarray  # in_dim x out_dim
    b: np.ndarray  # 1 x out_dim
    activation: str = RELU

    def __post_init__(self):
        self.W = as_matrix(self.W)
        self.b = as_matrix(self.b)
        if self.b.shape != (1, self.W.shape[1]):
            raise ShapeError(f"bias shape {self.b.shape} does not match W {self.W.shape}")
        if self.activation not in (RELU, SOFTMAX):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape

    def affine(self, x: np.ndarray) -> np.ndarray:
        return x @ self.W + self.b

    def backprop(self, x, delta, need_dx=True):
        grads = {"W": x.T @ delta, "b": delta.sum(axis=0, keepdims=True)}
        dx = delta @ self.W.T if need_dx else None
        return grads, dx

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}


@dataclass
class MlpModel:
    layers: list

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        for k, (prev, cur) in enumerate(zip(self.layers, self.layers[1:]), start=1):
            if prev.shape[1] != cur.shape[0]:
                raise ShapeError(f"layer {k} input {cur.shape[0]} != layer {k - 1} output {prev.shape[1]}")
        acts = [layer.activation for layer in self.layers]
        if acts[-1] != SOFTMAX or SOFTMAX in acts[:-1]:
            raise ValueError("exactly the final layer must be the softmax output")

    @property
    def input_dim(self) -> int:
        return self.layers[0].shape[0]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [layer.shape for layer in self.layers]


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    pre: list[np.ndarray] = field(default_factory=list)  # pre-activation of each layer

    @property
    def depth(self) -> int:
        return len(self.pre)


@dataclass
class Gradients:
    layers: list[dict[str, np.ndarray]]

    def __getitem__(self, k):
        return self.layers[k]


def mlp_shapes(input_dim: int = INPUT_DIM, hidden=HIDDEN, n_classes: int = N_CLASSES):
    dims = [input_dim, *hidden, n_classes]
    return list(zip(dims[:-1], dims[1:]))


def he_normal(rng: SeededRng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng_normal(rng, fan_in, fan_out, 0.0, np.sqrt(2.0 / fan_in))


def init_mlp(rng: SeededRng, shapes=None) -> MlpModel:
    """He-normal weights, zero biases; layer ``k`` draws from ``rng.child("base", k)``."""
    shapes = shapes or mlp_shapes()
    layers = []
    for k, (m, n) in enumerate(shapes):
        act = SOFTMAX if k == len(shapes) - 1 else RELU
        layers.append(DenseLayer(he_normal(rng.child("base", k), m, n), np.zeros((1, n)), act))
    return MlpModel(layers)


def forward(model: MlpModel, batch_x: np.ndarray):
    """Return ``(logits, cache)``; logits are the final pre-softmax scores."""
    if batch_x.ndim != 2 or batch_x.shape[1] != model.input_dim:
        raise ShapeError(f"input width {batch_x.shape} does not match model input {model.input_dim}")
    cache = ForwardCache()
    h = batch_x
    for layer in model.layers:
        z = layer.affine(h)
        cache.inputs.append(h)
        cache.pre.append(z)
        h = np.maximum(z, 0.0) if layer.activation == RELU else z
    return h, cache


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise ShapeError(f"expected {n_rows} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return labels.astype(np.int64, copy=False)


def loss_and_grad(logits: np.ndarray, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = float(-log_p[rows, labels].mean())
    dlogits = np.exp(log_p)
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def backward(model: MlpModel, cache: ForwardCache, dlogits: np.ndarray) -> Gradients:
    if cache.depth != len(model.layers):
        raise ValueError(f"cache depth {cache.depth} does not match {len(model.layers)} layers")
    if dlogits.shape != cache.pre[-1].shape:
        raise ShapeError(f"dlogits {dlogits.shape} does not match logits {cache.pre[-1].shape}")
    grads: list = [None] * len(model.layers)
    delta = dlogits
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        grads[k], dx = layer.backprop(cache.inputs[k], delta, need_dx=k > 0)
        if k > 0:
            delta = dx * (cache.pre[k - 1] > 0.0)
    return Gradients(grads)


def sgd_step(model: MlpModel, grads: Gradients, eta: float) -> None:
    """In-place ``p -= eta * grad(p)`` for every trainable parameter."""
    if len(grads.layers) != len(model.layers):
        raise ShapeError("gradients do not mirror the model")
    for layer, g in zip(model.layers, grads.layers):
        params = layer.params()
        if params.keys() != g.keys():
            raise ShapeError(f"gradient keys {sorted(g)} do not match parameters {sorted(params)}")
        for name, p in params.items():
            if p.shape != g[name].shape:
                raise ShapeError(f"gradient for {name} has shape {g[name].shape}, expected {p.shape}")
            p -= eta * g[name]


def predict(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(logits, axis=1)


def evaluate(model: MlpModel, test_x: np.ndarray, test_y, batch_size: int = 5000):
    """Return ``(accuracy, mean cross-entropy)`` over the whole test set."""
    test_y = np.asarray(test_y)
    n = test_x.shape[0]
    if n == 0:
        raise ValueError("cannot evaluate on an empty test set")
    if test_y.shape != (n,):
        raise ShapeError(f"{n} test samples but labels have shape {test_y.shape}")
    correct = 0
    loss_sum = 0.0
    for start in range(0, n, batch_size):
        xb = test_x[start:start + batch_size]
        yb = test_y[start:start + batch_size]
        logits, _ = forward(model, xb)
        loss, _ = loss_and_grad(logits, yb)
        loss_sum += loss * len(yb)
        correct += int((predict(logits) == yb).sum())
    return correct / n, loss_sum / n


def train_epoch(model: MlpModel, x: np.ndarray, y: np.ndarray, order: np.ndarray,
                batch_size: int, eta: float) -> float:
    """One pass of minibatch SGD over ``x[order]``; returns the mean batch loss."""
    losses = []
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        logits, cache = forward(model, x[idx])
        loss, dlogits = loss_and_grad(logits, y[idx])
        sgd_step(model, backward(model, cache, dlogits), eta)
        losses.append(loss)
    return float(np.mean(losses)) if losses else float("nan")

