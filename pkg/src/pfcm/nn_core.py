"""Small deterministic CNN engine on flat float64 weight vectors.

Architecture: conv3x3(same) -> ReLU -> conv3x3(same) -> ReLU -> flatten
-> FC -> ReLU -> FC -> logits.  Every function takes the model as a
:class:`FlatWeights` so federation, clustering and similarity code can treat
a model as a single vector.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import LabelError, LayoutError, ShapeError

CHECKPOINT_MAGIC = "pfcm-flatweights-v1"


@dataclass(frozen=True)
class CnnSpec:
    input_side: int = 9
    in_channels: int = 1
    conv1_channels: int = 10
    conv2_channels: int = 20
    kernel_side: int = 3
    fc_hidden: int = 50
    num_classes: int = 3

    def __post_init__(self):
        if self.num_classes not in (2, 3):
            raise ValueError(f"num_classes must be 2 or 3, got {self.num_classes}")
        if self.kernel_side % 2 != 1:
            raise ValueError("kernel_side must be odd for 'same' padding")
        for name in ("input_side", "in_channels", "conv1_channels",
                     "conv2_channels", "kernel_side", "fc_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def padding(self) -> int:
        return self.kernel_side // 2

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Canonical (name, shape) order of every parameter tensor."""
        k, s = self.kernel_side, self.input_side
        return [
            ("conv1.weight", (self.conv1_channels, self.in_channels, k, k)),
            ("conv1.bias", (self.conv1_channels,)),
            ("conv2.weight", (self.conv2_channels, self.conv1_channels, k, k)),
            ("conv2.bias", (self.conv2_channels,)),
            ("fc1.weight", (self.fc_hidden, self.conv2_channels * s * s)),
            ("fc1.bias", (self.fc_hidden,)),
            ("fc2.weight", (self.num_classes, self.fc_hidden)),
            ("fc2.bias", (self.num_classes,)),
        ]


@dataclass(frozen=True)
class LayerSlot:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class Layout:
    slots: tuple[LayerSlot, ...]

    def __post_init__(self):
        pos = 0
        for slot in self.slots:
            if slot.offset != pos:
                raise LayoutError(
                    f"slot {slot.name!r} starts at {slot.offset}, expected {pos}")
            pos += slot.size

    @property
    def total(self) -> int:
        return sum(s.size for s in self.slots)

    @classmethod
    def for_spec(cls, spec: CnnSpec) -> "Layout":
        slots, pos = [], 0
        for name, shape in spec.param_shapes():
            slots.append(LayerSlot(name, tuple(shape), pos))
            pos += int(np.prod(shape))
        return cls(tuple(slots))

    def to_json(self) -> list:
        return [[s.name, list(s.shape), s.offset] for s in self.slots]

    @classmethod
    def from_json(cls, rows) -> "Layout":
        return cls(tuple(LayerSlot(str(n), tuple(int(d) for d in shp), int(off))
                         for n, shp, off in rows))


@dataclass(frozen=True, eq=False)
class FlatWeights:
    """All model parameters as one float64 vector plus the layout describing it."""

    values: np.ndarray
    layout: Layout = field(repr=False)

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size != self.layout.total:
            raise LayoutError(
                f"flat vector of length {values.size} does not match layout "
                f"total {self.layout.total}")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.size

    def check_compatible(self, other: "FlatWeights") -> None:
        if self.layout != other.layout:
            raise LayoutError("weight layouts differ")

    def replace(self, values) -> "FlatWeights":
        return FlatWeights(np.asarray(values, dtype=np.float64), self.layout)

    def copy(self) -> "FlatWeights":
        return FlatWeights(self.values.copy(), self.layout)


def param_count(spec: CnnSpec) -> int:
    return Layout.for_spec(spec).total


def validate_layout(layout: Layout, spec: CnnSpec) -> None:
    expected = Layout.for_spec(spec)
    if layout != expected:
        got = [s.name for s in layout.slots]
        want = [s.name for s in expected.slots]
        raise LayoutError(f"layout {got} does not match canonical order {want} "
                          "(or shapes differ)")


def flatten(params: dict[str, np.ndarray], spec: CnnSpec,
            layout: Layout | None = None) -> FlatWeights:
    """Pack per-layer arrays into a FlatWeights using the canonical order."""
    if layout is None:
        layout = Layout.for_spec(spec)
    validate_layout(layout, spec)
    missing = [s.name for s in layout.slots if s.name not in params]
    if missing:
        raise LayoutError(f"missing parameters: {missing}")
    parts = []
    for slot in layout.slots:
        arr = np.asarray(params[slot.name], dtype=np.float64)
        if arr.shape != slot.shape:
            raise ShapeError(slot.name, f"expected shape {slot.shape}, got {arr.shape}")
        parts.append(arr.ravel())
    return FlatWeights(np.concatenate(parts), layout)


def unflatten(weights: FlatWeights, spec: CnnSpec) -> dict[str, np.ndarray]:
    """Per-layer views into ``weights.values`` (no copy)."""
    validate_layout(weights.layout, spec)
    return {s.name: weights.values[s.offset:s.offset + s.size].reshape(s.shape)
            for s in weights.layout.slots}


def init_weights(spec: CnnSpec, seed: int) -> FlatWeights:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases of each layer."""
    rng = np.random.default_rng(seed)
    layout = Layout.for_spec(spec)
    values = np.empty(layout.total)
    fan_in = {
        "conv1": spec.in_channels * spec.kernel_side ** 2,
        "conv2": spec.conv1_channels * spec.kernel_side ** 2,
        "fc1": spec.conv2_channels * spec.input_side ** 2,
        "fc2": spec.fc_hidden,
    }
    for slot in layout.slots:
        bound = 1.0 / np.sqrt(fan_in[slot.name.split(".")[0]])
        values[slot.offset:slot.offset + slot.size] = rng.uniform(-bound, bound, slot.size)
    return FlatWeights(values, layout)


def zeros_like(weights: FlatWeights) -> FlatWeights:
    return FlatWeights(np.zeros_like(weights.values), weights.layout)


# ---------------------------------------------------------------------------
# layers

def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """(N, C, H, W) -> (N*H*W, C*k*k) patches for a stride-1 'same' conv."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N, C, H, W, k, k
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, c * k * k)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], k: int, pad: int) -> np.ndarray:
    n, c, h, w = shape
    cols = cols.reshape(n, h, w, c, k, k)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for di in range(k):
        for dj in range(k):
            out[:, :, di:di + h, dj:dj + w] += cols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return out[:, :, pad:pad + h, pad:pad + w]


def _conv_forward(x, weight, bias, k, pad):
    n, _, h, w = x.shape
    cols = _im2col(x, k, pad)
    out = cols @ weight.reshape(weight.shape[0], -1).T + bias
    out = out.reshape(n, h, w, -1).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def _conv_backward(dout, cols, x_shape, weight, k, pad):
    cout = weight.shape[0]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    dweight = (d2.T @ cols).reshape(weight.shape)
    dbias = d2.sum(axis=0)
    dx = _col2im(d2 @ weight.reshape(cout, -1), x_shape, k, pad)
    return dx, dweight, dbias


def _check_batch(batch: np.ndarray, spec: CnnSpec) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    want = (spec.in_channels, spec.input_side, spec.input_side)
    if batch.ndim == 3 and spec.in_channels == 1:
        batch = batch[:, None]
    if batch.ndim != 4 or batch.shape[1:] != want:
        raise ShapeError("conv1", f"expected batch of shape (N, {want[0]}, {want[1]}, "
                         f"{want[2]}), got {batch.shape}")
    return batch


def _forward_cache(weights: FlatWeights, spec: CnnSpec, batch: np.ndarray):
    p = unflatten(weights, spec)
    k, pad = spec.kernel_side, spec.padding
    z1, cols1 = _conv_forward(batch, p["conv1.weight"], p["conv1.bias"], k, pad)
    a1 = np.maximum(z1, 0.0)
    z2, cols2 = _conv_forward(a1, p["conv2.weight"], p["conv2.bias"], k, pad)
    a2 = np.maximum(z2, 0.0)
    flat = a2.reshape(a2.shape[0], -1)
    z3 = flat @ p["fc1.weight"].T + p["fc1.bias"]
    a3 = np.maximum(z3, 0.0)
    logits = a3 @ p["fc2.weight"].T + p["fc2.bias"]
    cache = (p, batch, z1, cols1, a1, z2, cols2, flat, z3, a3)
    return logits, cache


def forward(weights: FlatWeights, spec: CnnSpec, batch) -> np.ndarray:
    """Logits of shape (N, num_classes) for a batch of shape (N, 1, 9, 9)."""
    logits, _ = _forward_cache(weights, spec, _check_batch(batch, spec))
    return logits


def predict(weights: FlatWeights, spec: CnnSpec, batch) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class id on ties
    return np.argmax(forward(weights, spec, batch), axis=1)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(labels, n: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError("labels", f"expected {n} labels, got shape {labels.shape}")
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        i = int(bad[0])
        raise LabelError(i, int(labels[i]), num_classes)
    return labels.astype(np.int64)


def loss(weights: FlatWeights, spec: CnnSpec, batch, labels) -> float:
    batch = _check_batch(batch, spec)
    labels = _check_labels(labels, batch.shape[0], spec.num_classes)
    logp = _log_softmax(forward(weights, spec, batch))
    return float(-logp[np.arange(labels.size), labels].mean())


def loss_and_grad(weights: FlatWeights, spec: CnnSpec, batch, labels):
    """Mean cross-entropy over the batch and its gradient as a FlatWeights."""
    batch = _check_batch(batch, spec)
    n = batch.shape[0]
    labels = _check_labels(labels, n, spec.num_classes)
    logits, (p, x, z1, cols1, a1, z2, cols2, flat, z3, a3) = _forward_cache(weights, spec, batch)
    logp = _log_softmax(logits)
    value = float(-logp[np.arange(n), labels].mean())

    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n

    grads = {
        "fc2.weight": dlogits.T @ a3,
        "fc2.bias": dlogits.sum(axis=0),
    }
    dz3 = (dlogits @ p["fc2.weight"]) * (z3 > 0)
    grads["fc1.weight"] = dz3.T @ flat
    grads["fc1.bias"] = dz3.sum(axis=0)
    dz2 = (dz3 @ p["fc1.weight"]).reshape(z2.shape) * (z2 > 0)
    k, pad = spec.kernel_side, spec.padding
    da1, grads["conv2.weight"], grads["conv2.bias"] = _conv_backward(
        dz2, cols2, a1.shape, p["conv2.weight"], k, pad)
    dz1 = da1 * (z1 > 0)
    _, grads["conv1.weight"], grads["conv1.bias"] = _conv_backward(
        dz1, cols1, x.shape, p["conv1.weight"], k, pad)
    return value, flatten(grads, spec, weights.layout)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimizerState:
    """SGD with classical momentum.

    ``velocity <- momentum * velocity + grad``; ``weights <- weights - lr * velocity``.
    """

    learning_rate: float = 0.1
    momentum: float = 0.5
    velocity: FlatWeights | None = None

    def reset(self):
        self.velocity = None


def sgd_step(weights: FlatWeights, grad: FlatWeights, opt: OptimizerState) -> FlatWeights:
    weights.check_compatible(grad)
    if opt.velocity is None:
        opt.velocity = zeros_like(weights)
    else:
        weights.check_compatible(opt.velocity)
    velocity = opt.momentum * opt.velocity.values + grad.values
    opt.velocity = FlatWeights(velocity, weights.layout)
    return FlatWeights(weights.values - opt.learning_rate * velocity, weights.layout)


def train_epochs(weights: FlatWeights, spec: CnnSpec, X, y, epochs: int,
                 lr: float = 0.1, momentum: float = 0.5,
                 batch_size: int | None = None, seed: int = 0):
    """Run ``epochs`` passes of SGD from ``weights`` with a fresh optimizer.

    ``batch_size=None`` is full-batch; otherwise samples are shuffled per
    epoch with an RNG seeded by ``seed``.  Returns ``(weights, losses)`` with
    the loss of the first batch of each epoch.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    X = _check_batch(X, spec)
    y = np.asarray(y)
    opt = OptimizerState(lr, momentum)
    rng = np.random.default_rng(seed) if batch_size else None
    losses = []
    for _ in range(epochs):
        if batch_size is None or batch_size >= len(y):
            batches = [np.arange(len(y))]
        else:
            order = rng.permutation(len(y))
            batches = [order[i:i + batch_size] for i in range(0, len(y), batch_size)]
        for j, idx in enumerate(batches):
            value, grad = loss_and_grad(weights, spec, X[idx], y[idx])
            if j == 0:
                losses.append(value)
            weights = sgd_step(weights, grad, opt)
    return weights, losses


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, weights: FlatWeights, meta: dict | None = None) -> None:
    """One JSON header line, then the vector as little-endian float64."""
    header = {"format": CHECKPOINT_MAGIC, "total": weights.layout.total,
              "layout": weights.layout.to_json()}
    if meta:
        header["meta"] = meta
    line = json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n"
    Path(path).write_bytes(line.encode("ascii") + weights.values.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[FlatWeights, dict]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise LayoutError(f"{path}: missing checkpoint header line")
    header = json.loads(raw[:nl].decode("ascii"))
    if header.get("format") != CHECKPOINT_MAGIC:
        raise LayoutError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    layout = Layout.from_json(header["layout"])
    body = raw[nl + 1:]
    if len(body) != 8 * header["total"] or layout.total != header["total"]:
        raise LayoutError(f"{path}: payload has {len(body)} bytes, expected "
                          f"{8 * header['total']}")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return FlatWeights(values, layout), header.get("meta", {})

