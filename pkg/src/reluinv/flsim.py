"""Client-side federated learning simulator for ReLU MLPs.

The model is a stack of fully-connected layers with ReLU on every hidden
layer and a linear classification head.  Inputs are matrices whose columns
are datapoints.  The loss is softmax cross-entropy averaged over the batch.

Only the first layer is observed by the attacker, so every capture stores
the first layer's gradient (or pseudo-gradient) together with the layer
parameters the attacker already knows.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError

FEDSGD = "fedsgd"
FEDAVG = "fedavg"
DPSGD = "dpsgd"
PROTOCOLS = (FEDSGD, FEDAVG, DPSGD)


@dataclass
class MlpModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("model needs matching, non-empty weight and bias lists")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ShapeError(f"layer {k}: weight {W.shape} and bias {b.shape} do not match")
            if k > 0 and W.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(
                    f"layer {k}: fan_in {W.shape[1]} != fan_out of layer {k - 1} "
                    f"({self.weights[k - 1].shape[0]})"
                )

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def depth(self) -> int:
        return len(self.weights)

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def save(self, path) -> None:
        arrays = {}
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"W{k}"] = W
            arrays[f"b{k}"] = b
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "MlpModel":
        with np.load(Path(path)) as data:
            depth = sum(1 for key in data.files if key.startswith("W"))
            weights = [np.asarray(data[f"W{k}"], dtype=np.float64) for k in range(depth)]
            biases = [np.asarray(data[f"b{k}"], dtype=np.float64) for k in range(depth)]
        return cls(weights, biases)


def init_mlp(n: int, width: int, hidden_layers: int = 3, classes: int = 10, seed: int = 0) -> MlpModel:
    """Freshly initialized MLP: ``hidden_layers`` ReLU layers of ``width`` then a linear head.

    Weights are uniform with Kaiming fan-in bound sqrt(6 / fan_in); biases are
    uniform with bound 1 / sqrt(fan_in).
    """
    if n < 1 or width < 1 or hidden_layers < 1 or classes < 1:
        raise ConfigError("model dimensions must be positive")
    rng = np.random.default_rng(seed)
    dims = [n] + [width] * hidden_layers + [classes]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        bias_bound = 1.0 / np.sqrt(fan_in)
        biases.append(rng.uniform(-bias_bound, bias_bound, size=fan_out))
    return MlpModel(weights, biases)


@dataclass
class ForwardPass:
    inputs: np.ndarray
    pre: list[np.ndarray]  # Z_k per layer, last entry is the logits
    post: list[np.ndarray]  # ReLU(Z_k) for hidden layers

    @property
    def logits(self) -> np.ndarray:
        return self.pre[-1]


def forward(model: MlpModel, X: np.ndarray) -> ForwardPass:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"input must be a (n, batch) matrix, got shape {X.shape}")
    pre, post = [], []
    a = X
    last = model.depth - 1
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        if a.shape[0] != W.shape[1]:
            raise ShapeError(f"layer {k}: expects {W.shape[1]} inputs, got {a.shape[0]}")
        z = W @ a + b[:, None]
        pre.append(z)
        if k < last:
            a = np.maximum(z, 0.0)
            post.append(a)
    return ForwardPass(X, pre, post)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and the per-example (un-averaged) logit gradient."""
    labels = np.asarray(labels)
    shifted = logits - logits.max(axis=0, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=0))
    cols = np.arange(logits.shape[1])
    loss = float(np.mean(logsum - shifted[labels, cols]))
    probs = np.exp(shifted - logsum)
    probs[labels, cols] -= 1.0
    return loss, probs


def loss_value(model: MlpModel, X: np.ndarray, labels: np.ndarray) -> float:
    return cross_entropy(forward(model, X).logits, labels)[0]


@dataclass
class Gradients:
    dW: list[np.ndarray]
    db: list[np.ndarray]
    deltas: list[np.ndarray]  # dL/dZ_k per layer


def backward(model: MlpModel, fp: ForwardPass, dlogits: np.ndarray) -> Gradients:
    """Backpropagate a logit gradient through the network.

    The ReLU derivative is taken as 0 at Z = 0, so a zero in dL/dZ appears
    exactly where Z <= 0.
    """
    K = model.depth
    dW: list = [None] * K
    db: list = [None] * K
    deltas: list = [None] * K
    delta = dlogits
    for k in range(K - 1, -1, -1):
        deltas[k] = delta
        a_prev = fp.inputs if k == 0 else fp.post[k - 1]
        dW[k] = delta @ a_prev.T
        db[k] = delta.sum(axis=1)
        if k > 0:
            delta = (model.weights[k].T @ delta) * (fp.pre[k - 1] > 0)
    return Gradients(dW, db, deltas)


def per_example_norms(model: MlpModel, fp: ForwardPass, grads: Gradients) -> np.ndarray:
    """l2 norm of each example's full-parameter gradient, from per-layer deltas."""
    sq = np.zeros(fp.inputs.shape[1])
    for k, delta in enumerate(grads.deltas):
        a_prev = fp.inputs if k == 0 else fp.post[k - 1]
        sq += (delta**2).sum(axis=0) * ((a_prev**2).sum(axis=0) + 1.0)
    return np.sqrt(sq)


@dataclass(frozen=True)
class Protocol:
    kind: str = FEDSGD
    epochs: int = 0
    mini_batch: int = 0
    lr: float = 0.0
    clip: float = 0.0
    sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.kind!r}")

    @classmethod
    def fedsgd(cls) -> "Protocol":
        return cls(FEDSGD)

    @classmethod
    def fedavg(cls, epochs: int, mini_batch: int, lr: float) -> "Protocol":
        return cls(FEDAVG, epochs=int(epochs), mini_batch=int(mini_batch), lr=float(lr))

    @classmethod
    def dpsgd(cls, clip: float, sigma: float) -> "Protocol":
        return cls(DPSGD, clip=float(clip), sigma=float(sigma))

    @property
    def noisy(self) -> bool:
        return self.kind == DPSGD and self.sigma > 0

    def to_dict(self) -> dict:
        if self.kind == FEDAVG:
            return {"kind": self.kind, "epochs": self.epochs, "mini_batch": self.mini_batch, "lr": self.lr}
        if self.kind == DPSGD:
            return {"kind": self.kind, "clip": self.clip, "sigma": self.sigma}
        return {"kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "Protocol":
        return cls(**d)


@dataclass
class GroundTruth:
    X: np.ndarray  # (n, b) inputs
    Z: np.ndarray  # (m, b) first-layer pre-activations
    dZ: np.ndarray  # (m, b) factor with dW = dZ @ X.T (before any noise)


@dataclass
class GradientCapture:
    """What the attacker observes for one client round, plus sealed ground truth."""

    dW: np.ndarray
    db: np.ndarray
    layer_W: np.ndarray
    layer_b: np.ndarray
    protocol: Protocol = field(default_factory=Protocol)
    seed: int = 0
    truth: GroundTruth | None = None

    @property
    def m(self) -> int:
        return self.dW.shape[0]

    @property
    def n(self) -> int:
        return self.dW.shape[1]

    def without_truth(self) -> "GradientCapture":
        return GradientCapture(self.dW, self.db, self.layer_W, self.layer_b, self.protocol, self.seed, None)


def _check_batch(model: MlpModel, X: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] < 1:
        raise ShapeError(f"batch must be a non-empty (n, b) matrix, got shape {X.shape}")
    if X.shape[0] != model.input_dim:
        raise ShapeError(f"layer 0: expects {model.input_dim} inputs, got {X.shape[0]}")
    if labels.shape != (X.shape[1],):
        raise ShapeError(f"need one label per column, got {labels.shape} for batch of {X.shape[1]}")
    classes = model.weights[-1].shape[0]
    if labels.min() < 0 or labels.max() >= classes:
        raise ShapeError(f"labels must lie in [0, {classes})")
    return X, labels


def _batch_gradients(model: MlpModel, X: np.ndarray, labels: np.ndarray, scale: np.ndarray | None = None):
    fp = forward(model, X)
    _, raw = cross_entropy(fp.logits, labels)
    if scale is not None:
        raw = raw * scale
    grads = backward(model, fp, raw / X.shape[1])
    return fp, grads


def capture_fedsgd(model: MlpModel, X: np.ndarray, labels: np.ndarray, seed: int = 0) -> GradientCapture:
    X, labels = _check_batch(model, X, labels)
    fp, grads = _batch_gradients(model, X, labels)
    truth = GroundTruth(X.copy(), fp.pre[0].copy(), grads.deltas[0].copy())
    return GradientCapture(
        grads.dW[0], grads.db[0], model.weights[0].copy(), model.biases[0].copy(),
        Protocol.fedsgd(), int(seed), truth,
    )


def capture_dpsgd(
    model: MlpModel, X: np.ndarray, labels: np.ndarray, clip: float, sigma: float, seed: int = 0
) -> GradientCapture:
    """DP-SGD observation: per-example clipping over all parameters, mean, Gaussian noise.

    Noise of standard deviation ``sigma`` is drawn for the observed first
    layer's weight and bias coordinates from ``default_rng(seed)``.
    """
    if not clip > 0:
        raise ConfigError("clip norm must be positive")
    if sigma < 0:
        raise ConfigError("noise std must be non-negative")
    X, labels = _check_batch(model, X, labels)
    fp = forward(model, X)
    _, raw = cross_entropy(fp.logits, labels)
    norms = per_example_norms(model, fp, backward(model, fp, raw))
    with np.errstate(divide="ignore"):
        factors = np.minimum(1.0, clip / norms)
    grads = backward(model, fp, raw * factors / X.shape[1])
    dW, db = grads.dW[0], grads.db[0]
    if sigma > 0:
        rng = np.random.default_rng(seed)
        dW = dW + rng.normal(0.0, sigma, size=dW.shape)
        db = db + rng.normal(0.0, sigma, size=db.shape)
    truth = GroundTruth(X.copy(), fp.pre[0].copy(), grads.deltas[0].copy())
    return GradientCapture(
        dW, db, model.weights[0].copy(), model.biases[0].copy(),
        Protocol.dpsgd(clip, sigma), int(seed), truth,
    )


def capture_fedavg(
    model: MlpModel, X: np.ndarray, labels: np.ndarray, epochs: int, mini_batch: int, lr: float, seed: int = 0
) -> GradientCapture:
    """FedAvg observation: ``epochs`` of local minibatch SGD, reported as (W0 - W_E) / lr.

    Minibatches are a fresh permutation per epoch drawn from
    ``default_rng(seed)``; a short final minibatch is kept.  The sealed
    ``dZ`` is the sum of the first-layer deltas each datapoint received, so
    the pseudo-gradient still factors as dZ @ X.T.
    """
    if epochs < 1 or mini_batch < 1:
        raise ConfigError("epochs and mini-batch size must be at least 1")
    if not lr > 0:
        raise ConfigError("learning rate must be positive")
    X, labels = _check_batch(model, X, labels)
    b = X.shape[1]
    rng = np.random.default_rng(seed)
    local = model.copy()
    accum = np.zeros((model.width, b))
    for _ in range(epochs):
        order = rng.permutation(b)
        for start in range(0, b, mini_batch):
            idx = order[start:start + mini_batch]
            _, grads = _batch_gradients(local, X[:, idx], labels[idx])
            accum[:, idx] += grads.deltas[0]
            for k in range(local.depth):
                local.weights[k] = local.weights[k] - lr * grads.dW[k]
                local.biases[k] = local.biases[k] - lr * grads.db[k]
    W0, b0 = model.weights[0], model.biases[0]
    dW = (W0 - local.weights[0]) / lr
    db = (b0 - local.biases[0]) / lr
    truth = GroundTruth(X.copy(), forward(model, X).pre[0].copy(), accum)
    return GradientCapture(
        dW, db, W0.copy(), b0.copy(), Protocol.fedavg(epochs, mini_batch, lr), int(seed), truth,
    )
