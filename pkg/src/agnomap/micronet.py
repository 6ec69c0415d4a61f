"""Small NHWC convolutional classifier with hand-written backprop and Adam.

Batches are float32 arrays shaped (b, h, w, c). Layers are stateless during
gradient queries: forward returns a cache that backward consumes, so a model
can be shared read-only between concurrent gradient evaluations.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensorio
from .errors import ConfigError, InputError, TrainingError

log = logging.getLogger(__name__)

F32 = np.float32


class Layer:
    kind = "layer"
    tag = -1

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, dout, want_params: bool = True):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class Conv2d(Layer):
    """Stride-1 convolution; kernel stored as (kh, kw, cin, cout)."""

    kind = "conv2d"
    tag = 1

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, padding: str = "same"):
        super().__init__()
        if padding not in ("same", "valid"):
            raise ConfigError(f"conv padding must be 'same' or 'valid', got {padding!r}")
        if padding == "same" and kernel_size % 2 == 0:
            raise ConfigError("'same' padding needs an odd kernel size")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.padding = padding
        k = kernel_size
        self.params = {
            "weight": np.zeros((k, k, in_channels, out_channels), F32),
            "bias": np.zeros(out_channels, F32),
        }

    @property
    def pad(self) -> int:
        return self.kernel_size // 2 if self.padding == "same" else 0

    def output_shape(self, in_shape):
        h, w, c = in_shape
        if c != self.in_channels:
            raise ConfigError(f"conv expects {self.in_channels} input channels, got {c}")
        k, p = self.kernel_size, self.pad
        ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
        if ho < 1 or wo < 1:
            raise ConfigError(f"conv kernel {k} too large for {h}x{w} input")
        return (ho, wo, self.out_channels)

    @staticmethod
    def _im2col(x, k):
        win = sliding_window_view(x, (k, k), axis=(1, 2))  # b, ho, wo, c, kh, kw
        b, ho, wo, c = win.shape[:4]
        return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, k * k * c), (b, ho, wo)

    def forward(self, x):
        k, p = self.kernel_size, self.pad
        if p:
            x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        cols, (b, ho, wo) = self._im2col(x, k)
        wmat = self.params["weight"].reshape(-1, self.out_channels)
        out = cols @ wmat + self.params["bias"]
        return out.reshape(b, ho, wo, self.out_channels), cols

    def backward(self, cache, dout, want_params: bool = True):
        cols = cache
        k, p = self.kernel_size, self.pad
        co = dout.shape[-1]
        grads = {}
        if want_params:
            d2 = dout.reshape(-1, co)
            grads = {
                "weight": (cols.T @ d2).reshape(self.params["weight"].shape),
                "bias": d2.sum(axis=0),
            }
        # input gradient = full correlation of dout with the spatially flipped kernel
        q = k - 1 - p
        dpad = np.pad(dout, ((0, 0), (q, q), (q, q), (0, 0)))
        dcols, (b, h, w) = self._im2col(dpad, k)
        wflip = self.params["weight"][::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, self.in_channels)
        dx = (dcols @ wflip).reshape(b, h, w, self.in_channels)
        return dx, grads

    def __repr__(self):
        return f"Conv2d({self.in_channels}, {self.out_channels}, k={self.kernel_size}, {self.padding})"


class ReLU(Layer):
    kind = "relu"
    tag = 2

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, cache, dout, want_params: bool = True):
        return dout * cache, {}


class MaxPool2d(Layer):
    """2x2 max pooling, stride 2. Ties route the gradient to the first maximum."""

    kind = "maxpool2d"
    tag = 3

    def output_shape(self, in_shape):
        h, w, c = in_shape
        if h % 2 or w % 2:
            raise ConfigError(f"maxpool needs even spatial dims, got {h}x{w}")
        return (h // 2, w // 2, c)

    def forward(self, x):
        quads = (x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2])
        out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
        taken = np.zeros(out.shape, bool)
        masks = []
        for q in quads:
            m = (q == out) & ~taken
            taken |= m
            masks.append(m)
        return out, (masks, x.shape)

    def backward(self, cache, dout, want_params: bool = True):
        masks, shape = cache
        dx = np.empty(shape, dout.dtype)
        dx[:, 0::2, 0::2] = dout * masks[0]
        dx[:, 0::2, 1::2] = dout * masks[1]
        dx[:, 1::2, 0::2] = dout * masks[2]
        dx[:, 1::2, 1::2] = dout * masks[3]
        return dx, {}


class Flatten(Layer):
    kind = "flatten"
    tag = 4

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, dout, want_params: bool = True):
        return dout.reshape(cache), {}


class Dense(Layer):
    kind = "dense"
    tag = 5

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.params = {
            "weight": np.zeros((in_features, out_features), F32),
            "bias": np.zeros(out_features, F32),
        }

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ConfigError(f"dense expects ({self.in_features},) input, got {tuple(in_shape)}")
        return (self.out_features,)

    def forward(self, x):
        return x @ self.params["weight"] + self.params["bias"], x

    def backward(self, cache, dout, want_params: bool = True):
        grads = {"weight": cache.T @ dout, "bias": dout.sum(axis=0)} if want_params else {}
        return dout @ self.params["weight"].T, grads

    def __repr__(self):
        return f"Dense({self.in_features}, {self.out_features})"


LAYER_TYPES = {cls.tag: cls for cls in (Conv2d, ReLU, MaxPool2d, Flatten, Dense)}


@dataclass
class Classifier:
    layers: list
    input_shape: tuple
    num_classes: int

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if len(self.input_shape) != 3:
            raise ConfigError("input_shape must be (h, w, c)")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        self.shapes = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(layer.output_shape(self.shapes[-1]))
        if self.shapes[-1] != (self.num_classes,):
            raise ConfigError(f"network output shape {self.shapes[-1]} != ({self.num_classes},)")

    def parameters(self):
        """(layer index, name, array) for every parameter tensor, in layer order."""
        return [(i, name, arr) for i, layer in enumerate(self.layers) for name, arr in layer.params.items()]

    def copy(self) -> "Classifier":
        return copy.deepcopy(self)


def he_uniform_init(model: Classifier, seed: int) -> Classifier:
    rng = np.random.default_rng(seed)
    for layer in model.layers:
        if isinstance(layer, (Conv2d, Dense)):
            w = layer.params["weight"]
            fan_in = int(np.prod(w.shape[:-1]))
            limit = math.sqrt(6.0 / fan_in)
            layer.params["weight"] = rng.uniform(-limit, limit, size=w.shape).astype(F32)
            layer.params["bias"] = np.zeros_like(layer.params["bias"])
    return model


def build_classifier(input_shape=(32, 32, 3), num_classes=4, channels=(8, 16), seed=0) -> Classifier:
    """conv-relu-pool blocks followed by a single dense head."""
    h, w, c = input_shape
    layers = []
    for out_c in channels:
        layers += [Conv2d(c, out_c, 3, "same"), ReLU(), MaxPool2d()]
        c = out_c
        h, w = h // 2, w // 2
    layers += [Flatten(), Dense(h * w * c, num_classes)]
    return he_uniform_init(Classifier(layers, input_shape, num_classes), seed)


def _check_batch(model: Classifier, batch) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != model.input_shape:
        raise ConfigError(f"batch shape {batch.shape} does not match model input {model.input_shape}")
    return batch.astype(F32, copy=False)


def _check_labels(model: Classifier, labels, n: int) -> np.ndarray:
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (n,))
    if labels.size and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise InputError(f"labels must lie in [0, {model.num_classes})")
    return labels


def _forward_cached(model: Classifier, x: np.ndarray):
    caches = []
    for layer in model.layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    return x, caches


def forward(model: Classifier, batch) -> np.ndarray:
    """Logits of shape (b, L)."""
    x = _check_batch(model, batch)
    for layer in model.layers:
        x, _ = layer.forward(x)
    return x


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _per_sample_ce(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    return lse - z[np.arange(len(labels)), labels]


def loss_ce(logits, labels) -> float:
    """Mean cross-entropy over the batch."""
    logits = np.asarray(logits)
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (logits.shape[0],))
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InputError(f"labels must lie in [0, {logits.shape[1]})")
    return float(np.mean(_per_sample_ce(logits, labels)))


def backprop(model: Classifier, batch, labels, want_params: bool = True):
    """Per-sample cross-entropy losses, d(sum of losses)/d(batch) and summed parameter grads.

    Because each sample's loss only depends on that sample, the input gradient
    of the summed loss is exactly the per-sample gradient.
    """
    x = _check_batch(model, batch)
    labels = _check_labels(model, labels, x.shape[0])
    logits, caches = _forward_cached(model, x)
    losses = _per_sample_ce(logits, labels)
    d = softmax(logits)
    d[np.arange(len(labels)), labels] -= 1.0
    grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        d, grads[i] = model.layers[i].backward(caches[i], d, want_params)
    return losses, d, grads


def input_grad(model: Classifier, batch, label) -> np.ndarray:
    """Per-sample gradient of J_CE(sample, label) with respect to each input pixel."""
    _, dx, _ = backprop(model, batch, label, want_params=False)
    return dx


def param_grad(model: Classifier, batch, labels) -> list[dict[str, np.ndarray]]:
    """Gradient of the batch-mean cross-entropy, one dict per layer (empty for parameter-free layers)."""
    x = _check_batch(model, batch)
    _, _, grads = backprop(model, x, labels)
    n = F32(x.shape[0])
    return [{k: v / n for k, v in g.items()} for g in grads]


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    mu: dict = field(default_factory=dict)
    sigma: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One bias-corrected Adam update, applied in place to ``params`` (a name -> array dict)."""
    state.step_count += 1
    k = state.step_count
    bc1 = 1.0 - state.beta1 ** k
    bc2 = 1.0 - state.beta2 ** k
    for name, g in grads.items():
        if name not in state.mu:
            state.mu[name] = np.zeros_like(params[name])
            state.sigma[name] = np.zeros_like(params[name])
        mu, sigma = state.mu[name], state.sigma[name]
        mu *= state.beta1
        mu += (1.0 - state.beta1) * g
        sigma *= state.beta2
        sigma += (1.0 - state.beta2) * (g * g)
        mhat = mu / bc1
        shat = sigma / bc2
        params[name] -= (state.lr * mhat / (np.sqrt(shat) + state.epsilon)).astype(params[name].dtype)
    return params


def _flat_params(model: Classifier) -> dict:
    return {(i, name): arr for i, name, arr in model.parameters()}


def predict_proba(model: Classifier, images, batch_size: int = 256) -> np.ndarray:
    images = np.asarray(images, dtype=F32)
    out = [softmax(forward(model, images[i:i + batch_size])) for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.num_classes), F32)


def accuracy(model: Classifier, images, labels) -> float:
    if len(images) == 0:
        return float("nan")
    return float(np.mean(predict_proba(model, images).argmax(axis=1) == np.asarray(labels)))


@dataclass
class TrainResult:
    model: Classifier
    train_accuracy: float
    test_accuracy: float
    epoch_losses: list


def train(model: Classifier, dataset, epochs: int = 10, lr: float = 3e-3, seed: int = 0,
          test=None, batch_size: int = 32, final_lr_fraction: float = 0.1) -> TrainResult:
    """Adam minibatch training on a copy of ``model``.

    The learning rate decays linearly per epoch from ``lr`` to
    ``lr * final_lr_fraction``. ``dataset`` and ``test`` are anything with
    ``images`` (n, h, w, c) and ``labels`` (n,) attributes.
    """
    images = np.asarray(dataset.images, dtype=F32)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if len(images) == 0:
        raise InputError("cannot train on an empty dataset")
    _check_labels(model, labels, len(labels))
    model = model.copy()
    rng = np.random.default_rng(seed)
    state = AdamState(lr=lr)
    params = _flat_params(model)
    losses = []
    for epoch in range(epochs):
        frac = epoch / (epochs - 1) if epochs > 1 else 0.0
        state.lr = lr * (1.0 - (1.0 - final_lr_fraction) * frac)
        order = rng.permutation(len(images))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            batch_losses, _, grads = backprop(model, images[idx], labels[idx])
            total += float(batch_losses.sum())
            n = F32(len(idx))
            flat = {(i, k): v / n for i, g in enumerate(grads) for k, v in g.items()}
            adam_step(state, params, flat)
        mean_loss = total / len(images)
        if not math.isfinite(mean_loss) or not all(np.isfinite(p).all() for p in params.values()):
            raise TrainingError(f"training diverged at epoch {epoch}: mean loss {mean_loss}, lr {lr}")
        losses.append(mean_loss)
        log.debug("epoch %d loss %.4f", epoch, mean_loss)
    train_acc = accuracy(model, images, labels)
    test_acc = accuracy(model, test.images, test.labels) if test is not None else float("nan")
    return TrainResult(model, train_acc, test_acc, losses)


def last_conv_index(model: Classifier) -> int:
    idx = [i for i, layer in enumerate(model.layers) if isinstance(layer, Conv2d)]
    if not idx:
        raise ConfigError("model has no convolutional layer")
    i = idx[-1]
    if i + 1 < len(model.layers) and isinstance(model.layers[i + 1], ReLU):
        i += 1
    return i


def conv_base_activations(model: Classifier, image) -> np.ndarray:
    """Post-ReLU activations of the last conv layer for one (h, w, c) image."""
    stop = last_conv_index(model)
    x = _check_batch(model, np.asarray(image)[None])
    for layer in model.layers[:stop + 1]:
        x, _ = layer.forward(x)
    return x[0]


# checkpoints

def model_records(model: Classifier) -> list[tensorio.Record]:
    recs = [tensorio.Record(0, [*model.input_shape, model.num_classes, len(model.layers)])]
    for layer in model.layers:
        if isinstance(layer, Conv2d):
            ints = [layer.in_channels, layer.out_channels, layer.kernel_size, int(layer.padding == "same")]
        elif isinstance(layer, Dense):
            ints = [layer.in_features, layer.out_features]
        else:
            ints = []
        recs.append(tensorio.Record(layer.tag, ints, [layer.params[k] for k in layer.params]))
    return recs


def model_from_records(records: list[tensorio.Record]) -> Classifier:
    if not records or records[0].tag != 0 or len(records[0].ints) != 5:
        raise InputError("model checkpoint missing header record")
    h, w, c, num_classes, n_layers = records[0].ints
    if len(records) != n_layers + 1:
        raise InputError("model checkpoint layer count mismatch")
    layers = []
    for rec in records[1:]:
        cls = LAYER_TYPES.get(rec.tag)
        if cls is None:
            raise InputError(f"unknown layer tag {rec.tag}")
        if cls is Conv2d:
            cin, cout, k, same = rec.ints
            layer = Conv2d(cin, cout, k, "same" if same else "valid")
        elif cls is Dense:
            layer = Dense(*rec.ints)
        else:
            layer = cls()
        for name, t in zip(layer.params, rec.tensors):
            if t.shape != layer.params[name].shape:
                raise InputError(f"{layer!r} {name} has shape {t.shape}")
            layer.params[name] = t.copy()
        layers.append(layer)
    return Classifier(layers, (h, w, c), num_classes)


def save_model(model: Classifier, path) -> None:
    tensorio.write(path, tensorio.KIND_MODEL, model_records(model))


def load_model(path) -> Classifier:
    kind, records = tensorio.read(path)
    if kind != tensorio.KIND_MODEL:
        raise InputError(f"{path} is not a model checkpoint")
    return model_from_records(records)
