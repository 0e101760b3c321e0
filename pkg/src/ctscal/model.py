"""A small numpy CNN with an exposed style layer and hand-written backprop.

Architecture::

    (x - 0.5) -> conv1 (3->8, 3x3, s1, p1) -> ReLU -> [style layer] ->
    conv2 (8->16, 3x3, s2, p1) -> ReLU -> global avg pool -> linear (16->K)

``features`` returns the style-layer activation and ``head`` runs the rest
of the network, so a swapped or perturbed feature map can be pushed
through the remaining layers.
"""

import copy
import json
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputError, TrainingError
from .numerics import log_softmax_t, make_rng

ARCH_TAG = "smallcnn-v1"
IMAGE_SHAPE = (3, 16, 16)
INPUT_CENTER = 0.5  # pixels in [0, 1] are shifted to [-0.5, 0.5] before conv1
STYLE_LAYERS = ("conv1_relu", "conv1_pre")

_SHAPES = {
    "conv1_w": lambda k: (8, 3, 3, 3),
    "conv1_b": lambda k: (8,),
    "conv2_w": lambda k: (16, 8, 3, 3),
    "conv2_b": lambda k: (16,),
    "fc_w": lambda k: (k, 16),
    "fc_b": lambda k: (k,),
}
PARAM_NAMES = tuple(_SHAPES)


# --- convolution primitives ---------------------------------------------

def _im2col(x, k, stride, pad):
    n, c, _, _ = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def conv2d(x, w, b, stride=1, pad=1):
    o, _, k, _ = w.shape
    cols, ho, wo = _im2col(x, k, stride, pad)
    out = cols @ w.reshape(o, -1).T + b
    return out.reshape(x.shape[0], ho, wo, o).transpose(0, 3, 1, 2), cols


def conv2d_backward(dout, x_shape, cols, w, stride=1, pad=1, need_dx=True):
    n, c, h, wd = x_shape
    o, _, k, _ = w.shape
    ho, wo = dout.shape[2], dout.shape[3]
    d = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (d.T @ cols).reshape(w.shape)
    db = d.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (w.reshape(o, -1).T @ d.T).reshape(c, k, k, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * pad, wd + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    return dxp[:, :, pad:pad + h, pad:pad + wd].transpose(1, 0, 2, 3), dw, db


# --- model ----------------------------------------------------------------

@dataclass
class SmallCnn:
    params: dict
    n_classes: int
    style_layer: str = "conv1_relu"
    train_seed: int = None

    @classmethod
    def init(cls, n_classes, rng, style_layer="conv1_relu"):
        """Fan-in scaled uniform weights (bound sqrt(6/fan_in)), zero biases."""
        if style_layer not in STYLE_LAYERS:
            raise InputError(f"unknown style layer {style_layer!r}")
        params = {}
        for name in PARAM_NAMES:
            shape = _SHAPES[name](n_classes)
            if name.endswith("_b"):
                params[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                bound = np.sqrt(6.0 / fan_in)
                params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(params=params, n_classes=n_classes, style_layer=style_layer)

    def copy(self):
        return copy.deepcopy(self)

    @property
    def feature_shape(self):
        return (8,) + IMAGE_SHAPE[1:]

    # forward pieces

    def features(self, images):
        x, single = _as_batch(images, IMAGE_SHAPE, "image")
        h, _ = conv2d(x - INPUT_CENTER, self.params["conv1_w"], self.params["conv1_b"], 1, 1)
        if self.style_layer == "conv1_relu":
            h = np.maximum(h, 0.0)
        return h[0] if single else h

    def head(self, feature):
        z, single = _as_batch(feature, self.feature_shape, "feature")
        if self.style_layer == "conv1_pre":
            z = np.maximum(z, 0.0)
        h, _ = conv2d(z, self.params["conv2_w"], self.params["conv2_b"], 2, 1)
        h = np.maximum(h, 0.0)
        pooled = h.mean(axis=(2, 3))
        logits = pooled @ self.params["fc_w"].T + self.params["fc_b"]
        return logits[0] if single else logits

    # serialization

    def to_dict(self):
        return {
            "architecture": ARCH_TAG,
            "n_classes": self.n_classes,
            "style_layer": self.style_layer,
            "training_seed": self.train_seed,
            "layers": {
                name: {"shape": list(p.shape), "weights": p.ravel().tolist()}
                for name, p in self.params.items()
            },
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("architecture") != ARCH_TAG:
            raise InputError(f"unsupported architecture {doc.get('architecture')!r}")
        k = int(doc["n_classes"])
        params = {}
        for name in PARAM_NAMES:
            layer = doc["layers"][name]
            shape = tuple(layer["shape"])
            if shape != _SHAPES[name](k):
                raise InputError(f"bad shape for {name}: {shape}")
            params[name] = np.asarray(layer["weights"], dtype=np.float64).reshape(shape)
        return cls(params, k, doc.get("style_layer", "conv1_relu"), doc.get("training_seed"))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _as_batch(x, shape, what):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == shape:
        return x[None], True
    if x.ndim == 4 and x.shape[1:] == shape:
        return x, False
    raise InputError(f"{what} shape {x.shape} does not match {shape}")


def forward(model, image):
    """Return ``(style-layer feature, logits)`` for one image or a batch."""
    z = model.features(image)
    return z, model.head(z)


def forward_from_feature(model, feature):
    return model.head(feature)


def predict_logits(model, images, batch_size=256):
    images = np.asarray(images, dtype=np.float64)
    out = [model.head(model.features(images[i:i + batch_size]))
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.n_classes))


# --- training ---------------------------------------------------------------

def loss_and_grads(model, images, labels):
    """Mean cross-entropy over the batch and its gradient for every parameter.

    Returns ``(nan, None)`` when the forward pass overflows.
    """
    p = model.params
    x = np.asarray(images, dtype=np.float64) - INPUT_CENTER
    y = np.asarray(labels)
    n = len(x)

    a1, cols1 = conv2d(x, p["conv1_w"], p["conv1_b"], 1, 1)
    h1 = np.maximum(a1, 0.0)
    a2, cols2 = conv2d(h1, p["conv2_w"], p["conv2_b"], 2, 1)
    h2 = np.maximum(a2, 0.0)
    pooled = h2.mean(axis=(2, 3))
    logits = pooled @ p["fc_w"].T + p["fc_b"]
    if not np.all(np.isfinite(logits)):
        return float("nan"), None

    logp = log_softmax_t(logits)
    loss = -logp[np.arange(n), y].mean()

    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grads = {"fc_w": dlogits.T @ pooled, "fc_b": dlogits.sum(axis=0)}
    dpooled = dlogits @ p["fc_w"]
    dh2 = np.broadcast_to(dpooled[:, :, None, None] / (h2.shape[2] * h2.shape[3]), h2.shape)
    da2 = dh2 * (a2 > 0)
    dh1, grads["conv2_w"], grads["conv2_b"] = conv2d_backward(da2, h1.shape, cols2, p["conv2_w"], 2, 1)
    da1 = dh1 * (a1 > 0)
    _, grads["conv1_w"], grads["conv1_b"] = conv2d_backward(da1, x.shape, cols1, p["conv1_w"], 1, 1,
                                                          need_dx=False)
    return loss, grads


@dataclass
class TrainConfig:
    lr: float = 0.05
    batch_size: int = 32
    epochs: int = 30


def train(model, images, labels, config=None, rng=None, seed=0):
    """Mini-batch SGD on mean cross-entropy; returns ``(model, loss_trace)``.

    The input model is not modified. The trace holds the mean batch loss of
    each epoch. Raises ``TrainingError`` carrying the last finite parameters
    if the loss diverges.
    """
    config = config or TrainConfig()
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(images) == 0 or len(np.unique(labels)) < 2:
        raise InputError("training set must be non-empty and contain at least 2 classes")
    rng = rng if rng is not None else make_rng(seed)
    model = model.copy()
    model.train_seed = seed
    trace = []
    for epoch in range(config.epochs):
        checkpoint = model.copy()
        order = rng.permutation(len(images))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = loss_and_grads(model, images[idx], labels[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged in epoch {epoch}", checkpoint, epoch)
            for name in PARAM_NAMES:
                model.params[name] -= config.lr * grads[name]
            losses.append(loss)
        trace.append(float(np.mean(losses)))
    return model, trace


def accuracy_on(model, images, labels):
    return float(np.mean(np.argmax(predict_logits(model, images), axis=1) == np.asarray(labels)))
