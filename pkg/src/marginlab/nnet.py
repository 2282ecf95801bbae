"""Dense feedforward classifiers: forward pass, exact gradients, SGD training.

Networks are plain values: a list of dense layers (ReLU or linear), the input
dimension, the class count, and optionally the normalization that produced the
space the net operates in. The gradient op differentiates the *logit
difference* f_i − f_j with respect to any layer's activation vector — the
quantity every boundary-distance estimator in this package is built on.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, NormalizationMeta
from .errors import ConfigError, DomainError, TrainingDivergedError

logger = logging.getLogger(__name__)

_ACTIVATIONS = ("relu", "none")
MODEL_FORMAT = "mw-model/1"


@dataclass(frozen=True)
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str  # "relu" | "none"


@dataclass
class Network:
    layers: list[DenseLayer]
    input_dim: int
    num_classes: int
    norm_meta: NormalizationMeta | None = None


@dataclass
class Activations:
    """Per-layer activation vectors x^0 (input) through x^L (logits)."""

    per_layer: list[np.ndarray]


def layer_width(net: Network, lam: int) -> int:
    """Width of the activation vector at layer index ``lam`` (0 = input)."""
    if lam == 0:
        return net.input_dim
    return net.layers[lam - 1].weights.shape[0]


def _apply(layer: DenseLayer, a: np.ndarray) -> np.ndarray:
    z = a @ layer.weights.T + layer.bias
    if layer.activation == "relu":
        return np.maximum(z, 0.0)
    return z


def forward(net: Network, x: np.ndarray) -> Activations:
    """Run the net on one sample, keeping every intermediate activation."""
    a = np.asarray(x, dtype=np.float64)
    if a.shape != (net.input_dim,):
        raise DomainError(f"input shape {a.shape} does not match ({net.input_dim},)")
    per_layer = [a]
    for layer in net.layers:
        a = _apply(layer, a)
        per_layer.append(a)
    return Activations(per_layer=per_layer)


def forward_batch(net: Network, X: np.ndarray) -> list[np.ndarray]:
    """Activation matrices x^0..x^L for a batch; X has shape (s, input_dim)."""
    A = np.asarray(X, dtype=np.float64)
    out = [A]
    for layer in net.layers:
        A = _apply(layer, A)
        out.append(A)
    return out


def predict(net: Network, x: np.ndarray) -> int:
    """Argmax class; ties resolve to the lowest index."""
    return int(np.argmax(forward(net, x).per_layer[-1]))


def predict_batch(net: Network, X: np.ndarray) -> np.ndarray:
    return np.argmax(forward_batch(net, X)[-1], axis=1)


# ---------------------------------------------------------------------------
# logit-difference gradients


def logit_diffs_all_batch(net: Network, lam: int, X: np.ndarray, base: np.ndarray):
    """Logit differences and their gradients for every competitor class.

    For each row s of ``X`` (an activation matrix at layer ``lam``) and each
    class j, computes o[s, j] = f_i(x_s) − f_j(x_s) and the exact reverse-mode
    gradient G[s, j] = ∇_{x^lam}(f_i − f_j), where i = base[s]. Row j = base[s]
    is identically zero. Also returns the logits.
    """
    if not 0 <= lam < len(net.layers):
        raise DomainError(f"layer index {lam} outside [0, {len(net.layers)})")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    expected = layer_width(net, lam)
    if X.shape[1] != expected:
        raise DomainError(f"activation width {X.shape[1]} does not match layer {lam} "
                          f"width {expected}")
    base = np.asarray(base, dtype=np.int64)

    A = X
    trail = []  # (layer, pre-activation) pairs for the suffix
    for layer in net.layers[lam:]:
        Z = A @ layer.weights.T + layer.bias
        trail.append((layer, Z))
        A = np.maximum(Z, 0.0) if layer.activation == "relu" else Z
    logits = A

    s, c = X.shape[0], net.num_classes
    G = np.broadcast_to(-np.eye(c), (s, c, c)).copy()
    G[np.arange(s), :, base] += 1.0
    for layer, Z in reversed(trail):
        if layer.activation == "relu":
            G = G * (Z > 0.0)[:, None, :]  # relu'(0) = 0
        G = G @ layer.weights

    o = logits[np.arange(s), base][:, None] - logits
    return o, G, logits


def logit_diff_grad(net: Network, lam: int, x_lam: np.ndarray, i: int, j: int):
    """(f_i − f_j, ∇_{x^lam}(f_i − f_j)) at one activation vector."""
    if i == j:
        raise DomainError("class pair must be distinct")
    for k in (i, j):
        if not 0 <= k < net.num_classes:
            raise DomainError(f"class index {k} outside [0, {net.num_classes})")
    o, G, _ = logit_diffs_all_batch(net, lam, np.asarray(x_lam)[None, :],
                                    np.array([i]))
    return float(o[0, j]), G[0, j]


# ---------------------------------------------------------------------------
# initialization and training


def init_network(input_dim: int, hidden_widths, num_classes: int, seed: int,
                 norm_meta: NormalizationMeta | None = None) -> Network:
    """Uniform ±1/sqrt(fan_in) init; ReLU hidden layers, linear output."""
    if num_classes < 2:
        raise DomainError("num_classes must be >= 2")
    if input_dim < 1:
        raise DomainError("input_dim must be >= 1")
    widths = [int(input_dim), *[int(w) for w in hidden_widths], int(num_classes)]
    if any(w < 1 for w in widths):
        raise DomainError("layer widths must be >= 1")
    rng = np.random.default_rng(seed)
    layers = []
    for k in range(len(widths) - 1):
        fan_in = widths[k]
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(widths[k + 1], fan_in))
        b = rng.uniform(-bound, bound, size=widths[k + 1])
        act = "relu" if k < len(widths) - 2 else "none"
        layers.append(DenseLayer(weights=w, bias=b, activation=act))
    return Network(layers=layers, input_dim=input_dim, num_classes=num_classes,
                   norm_meta=norm_meta)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    learning_rate: float
    momentum: float = 0.9
    lr_decay_every: int = 0  # 0 disables decay
    lr_decay_factor: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise DomainError("epochs must be >= 1")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise DomainError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise DomainError("momentum must lie in [0, 1)")
        if self.lr_decay_every < 0:
            raise DomainError("lr_decay_every must be >= 0")
        if self.lr_decay_factor <= 0:
            raise DomainError("lr_decay_factor must be positive")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def train_sgd(net: Network, dataset: Dataset, config: TrainConfig) -> Network:
    """Mini-batch SGD with momentum on softmax cross-entropy.

    Deterministic for a fixed config seed. Raises TrainingDivergedError when
    the loss or any parameter stops being finite. Returns a new network; the
    input net provides the initial parameters and is left untouched.
    """
    X = dataset.features
    y = dataset.labels
    if X.shape[1] != net.input_dim:
        raise DomainError("dataset feature count does not match network input_dim")
    if dataset.class_count != net.num_classes:
        raise DomainError("dataset class_count does not match network num_classes")

    weights = [layer.weights.copy() for layer in net.layers]
    biases = [layer.bias.copy() for layer in net.layers]
    vel_w = [np.zeros_like(w) for w in weights]
    vel_b = [np.zeros_like(b) for b in biases]
    acts = [layer.activation for layer in net.layers]

    rng = np.random.default_rng(config.seed)
    lr = config.learning_rate
    s = X.shape[0]

    # divergence shows up as overflow/nan before the finiteness check catches
    # it; the warnings are noise, the typed error below is the signal
    with np.errstate(over="ignore", invalid="ignore"):
        _run_epochs(X, y, weights, biases, vel_w, vel_b, acts, rng, lr,
                    s, config)

    trained = Network(
        layers=[DenseLayer(w, b, a) for w, b, a in zip(weights, biases, acts)],
        input_dim=net.input_dim,
        num_classes=net.num_classes,
        norm_meta=net.norm_meta,
    )
    final_acc = accuracy(trained, dataset)
    logger.info("final train accuracy: %.4f", final_acc)
    return trained


def _run_epochs(X, y, weights, biases, vel_w, vel_b, acts, rng, lr, s,
                config: TrainConfig) -> None:
    for epoch in range(config.epochs):
        order = rng.permutation(s)
        epoch_loss = 0.0
        for start in range(0, s, config.batch_size):
            batch = order[start:start + config.batch_size]
            xb, yb = X[batch], y[batch]
            b = len(batch)

            # forward, keeping inputs and pre-activations per layer
            a = xb
            inputs, pres = [], []
            for wk, bk, act in zip(weights, biases, acts):
                inputs.append(a)
                z = a @ wk.T + bk
                pres.append(z)
                a = np.maximum(z, 0.0) if act == "relu" else z
            log_probs = _log_softmax(a)
            epoch_loss += -float(log_probs[np.arange(b), yb].sum())

            # backprop softmax cross-entropy
            delta = np.exp(log_probs)
            delta[np.arange(b), yb] -= 1.0
            delta /= b
            grads_w, grads_b = [None] * len(weights), [None] * len(weights)
            for k in range(len(weights) - 1, -1, -1):
                grads_w[k] = delta.T @ inputs[k]
                grads_b[k] = delta.sum(axis=0)
                if k > 0:
                    delta = delta @ weights[k]
                    if acts[k - 1] == "relu":
                        delta = delta * (pres[k - 1] > 0.0)

            for k in range(len(weights)):
                vel_w[k] = config.momentum * vel_w[k] + grads_w[k]
                vel_b[k] = config.momentum * vel_b[k] + grads_b[k]
                weights[k] -= lr * vel_w[k]
                biases[k] -= lr * vel_b[k]

        if not np.isfinite(epoch_loss) or any(
            not np.all(np.isfinite(w)) for w in weights
        ):
            raise TrainingDivergedError(
                f"training diverged at epoch {epoch + 1} (non-finite loss or weights)"
            )
        if config.lr_decay_every and (epoch + 1) % config.lr_decay_every == 0:
            lr *= config.lr_decay_factor


def accuracy(net: Network, dataset: Dataset) -> float:
    return float(np.mean(predict_batch(net, dataset.features) == dataset.labels))


# ---------------------------------------------------------------------------
# model file


def save_model(net: Network, path) -> None:
    norm = None
    if net.norm_meta is not None:
        m = net.norm_meta
        norm = {
            "scheme": m.scheme,
            "offsets": m.offsets.tolist(),
            "scales": m.scales.tolist(),
            "lower": m.lower.tolist(),
            "upper": m.upper.tolist(),
        }
    doc = {
        "format": MODEL_FORMAT,
        "input_dim": net.input_dim,
        "num_classes": net.num_classes,
        "norm": norm,
        "layers": [
            {"w": layer.weights.tolist(), "b": layer.bias.tolist(),
             "act": layer.activation}
            for layer in net.layers
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_model(path) -> Network:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read model file ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ConfigError(f"{path}: not a {MODEL_FORMAT} model file")
    try:
        input_dim = int(doc["input_dim"])
        num_classes = int(doc["num_classes"])
        raw_layers = doc["layers"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed model file ({exc})") from exc
    if num_classes < 2:
        raise ConfigError(f"{path}: num_classes must be >= 2")

    layers = []
    prev = input_dim
    for idx, entry in enumerate(raw_layers):
        try:
            w = np.asarray(entry["w"], dtype=np.float64)
            b = np.asarray(entry["b"], dtype=np.float64)
            act = entry["act"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: malformed layer {idx} ({exc})") from exc
        if act not in _ACTIVATIONS:
            raise ConfigError(f"{path}: layer {idx} has unknown activation {act!r}")
        if w.ndim != 2 or w.shape[1] != prev or b.shape != (w.shape[0],):
            raise ConfigError(f"{path}: layer {idx} shapes are inconsistent")
        layers.append(DenseLayer(weights=w, bias=b, activation=act))
        prev = w.shape[0]
    if not layers:
        raise ConfigError(f"{path}: model has no layers")
    if prev != num_classes:
        raise ConfigError(f"{path}: final layer width {prev} != num_classes")

    norm_meta = None
    if doc.get("norm") is not None:
        n = doc["norm"]
        try:
            norm_meta = NormalizationMeta(
                scheme=n["scheme"],
                offsets=np.asarray(n["offsets"], dtype=np.float64),
                scales=np.asarray(n["scales"], dtype=np.float64),
                lower=np.asarray(n["lower"], dtype=np.float64),
                upper=np.asarray(n["upper"], dtype=np.float64),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: malformed norm block ({exc})") from exc
        if norm_meta.scheme not in ("znorm", "minmax"):
            raise ConfigError(f"{path}: unknown normalization scheme "
                              f"{norm_meta.scheme!r}")
        if not np.all(norm_meta.lower < norm_meta.upper):
            raise ConfigError(f"{path}: normalization bounds must satisfy lower < upper")

    return Network(layers=layers, input_dim=input_dim, num_classes=num_classes,
                   norm_meta=norm_meta)
