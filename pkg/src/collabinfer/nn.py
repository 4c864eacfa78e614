"""Plaintext MLPs: definitions, forward pass, softmax, SGD trainer, datasets."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import NonFiniteLoss, ShapeMismatch, UnknownArchitecture

FC, RELU, SOFTMAX = "fully_connected", "relu", "softmax"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int = 0
    out_dim: int = 0


@dataclass
class ModelSpec:
    name: str
    layers: list[LayerSpec]
    weights: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        fcs = [l for l in self.layers if l.kind == FC]
        for prev, nxt in zip(fcs, fcs[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeMismatch(f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")
        if any(l.kind == SOFTMAX for l in self.layers[:-1]):
            raise ValueError("softmax may only appear as the final layer marker")
        if self.weights:
            if len(self.weights) != len(fcs):
                raise ShapeMismatch("one (W, b) pair is required per fully connected layer")
            for l, (w, b) in zip(fcs, self.weights):
                if w.shape != (l.in_dim, l.out_dim) or b.shape != (l.out_dim,):
                    raise ShapeMismatch(f"weight shapes {w.shape}/{b.shape} do not match {l}")

    @property
    def fc_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == FC]

    @property
    def input_dim(self) -> int:
        return self.fc_layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.fc_layers[-1].out_dim

    @property
    def num_params(self) -> int:
        return sum(l.in_dim * l.out_dim + l.out_dim for l in self.fc_layers)

    def copy(self) -> "ModelSpec":
        return replace(self, layers=list(self.layers), weights=[(w.copy(), b.copy()) for w, b in self.weights])


ARCHITECTURES: dict[str, list[int]] = {
    "small_mlp": [3072, 256, 10],
    "medium_mlp": [3072, 512, 256, 10],
    "large_mlp": [3072, 1024, 512, 256, 10],
}


def layers_from_dims(dims: list[int]) -> list[LayerSpec]:
    layers: list[LayerSpec] = []
    for i, (din, dout) in enumerate(zip(dims, dims[1:])):
        if i:
            layers.append(LayerSpec(RELU))
        layers.append(LayerSpec(FC, din, dout))
    layers.append(LayerSpec(SOFTMAX))
    return layers


def he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def build_model(name: str, dims: list[int] | None = None, seed: int | None = 0,
                weights: list[tuple[np.ndarray, np.ndarray]] | None = None) -> ModelSpec:
    """Instantiate a named MLP (or ``custom`` with explicit ``dims``)."""
    if name == "custom":
        if not dims or len(dims) < 2:
            raise UnknownArchitecture("custom models need dims with at least two entries")
    elif name in ARCHITECTURES:
        dims = ARCHITECTURES[name]
    else:
        raise UnknownArchitecture(name)
    layers = layers_from_dims(list(dims))
    if weights is None:
        rng = np.random.default_rng(seed)
        weights = [(he_uniform(rng, l.in_dim, l.out_dim), np.zeros(l.out_dim))
                   for l in layers if l.kind == FC]
    else:
        weights = [(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64)) for w, b in weights]
    return ModelSpec(name, layers, weights)


def forward(m: ModelSpec, x: np.ndarray) -> np.ndarray:
    """Logits of an affine + ReLU stack (no softmax)."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != m.input_dim:
        raise ShapeMismatch(f"input dim {h.shape[-1]} != model input dim {m.input_dim}")
    it = iter(m.weights)
    for layer in m.layers:
        if layer.kind == FC:
            w, b = next(it)
            h = h @ w + b
        elif layer.kind == RELU:
            h = np.maximum(h, 0.0)
    return h


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def entropy(p: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shannon entropy in nats with 0 log 0 := 0."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=axis)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int = 0
    image_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ShapeMismatch("inputs and labels differ in length")
        if not self.num_classes:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.num_classes, self.image_shape)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for row, label in zip(self.inputs, self.labels):
                w.writerow([repr(float(v)) for v in row] + [int(label)])

    @classmethod
    def from_csv(cls, path: str | Path, num_classes: int = 0) -> "LabeledDataset":
        data = np.loadtxt(path, delimiter=",", ndmin=2)
        return cls(data[:, :-1], data[:, -1].astype(np.int64), num_classes)


def make_blobs(n: int, num_classes: int = 2, dim: int = 2, spread: float = 0.5,
               separation: float = 4.0, seed: int | None = 0) -> LabeledDataset:
    """Gaussian class blobs with centres on a scaled simplex-like layout."""
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(num_classes, dim))
    centres = separation * centres / np.linalg.norm(centres, axis=1, keepdims=True)
    labels = rng.integers(0, num_classes, size=n)
    inputs = centres[labels] + spread * rng.normal(size=(n, dim))
    return LabeledDataset(inputs, labels, num_classes)


def load_digits_dataset() -> LabeledDataset:
    """The 8x8 handwritten-digit set bundled with scikit-learn, scaled to [0, 1]."""
    from sklearn.datasets import load_digits

    d = load_digits()
    return LabeledDataset(d.data / 16.0, d.target, 10, (8, 8, 1))


def train_test_split(ds: LabeledDataset, test_fraction: float = 0.25, seed: int | None = 0):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    n_test = int(round(len(ds) * test_fraction))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 0.1
    batch_size: int = 32
    seed: int = 0


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    p = softmax(logits)
    return float(-np.mean(np.log(np.clip(p[np.arange(len(labels)), labels], 1e-300, None))))


def accuracy(m: ModelSpec, ds: LabeledDataset) -> float:
    if len(ds) == 0:
        return 0.0
    return float(np.mean(forward(m, ds.inputs).argmax(axis=1) == ds.labels))


def train(m: ModelSpec, dataset: LabeledDataset, config: TrainConfig = TrainConfig()) -> ModelSpec:
    """Plain mini-batch SGD on softmax cross-entropy; returns a new model."""
    model = m.copy()
    rng = np.random.default_rng(config.seed)
    x_all, y_all = dataset.inputs, dataset.labels
    n = len(y_all)
    if n == 0:
        return model
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x, y = x_all[idx], y_all[idx]
            acts = [x]
            h = x
            for li, (w, b) in enumerate(model.weights):
                h = h @ w + b
                if li < len(model.weights) - 1:
                    h = np.maximum(h, 0.0)
                acts.append(h)
            probs = softmax(acts[-1])
            if not np.all(np.isfinite(probs)):
                raise NonFiniteLoss("training diverged")
            grad = probs
            grad[np.arange(len(y)), y] -= 1.0
            grad /= len(y)
            for li in range(len(model.weights) - 1, -1, -1):
                w, b = model.weights[li]
                gw = acts[li].T @ grad
                gb = grad.sum(axis=0)
                if li:
                    grad = (grad @ w.T) * (acts[li] > 0)
                model.weights[li] = (w - config.learning_rate * gw, b - config.learning_rate * gb)
        loss = cross_entropy(forward(model, x_all), y_all)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"non-finite loss {loss}")
    return model


# --------------------------------------------------------------------------
# weight file: u32 layer count, (u32 in, u32 out) per layer, then W and b as LE float64
# --------------------------------------------------------------------------

def save_weights(m: ModelSpec, path: str | Path) -> None:
    fcs = m.fc_layers
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(fcs)))
        for l in fcs:
            fh.write(struct.pack("<II", l.in_dim, l.out_dim))
        for w, b in m.weights:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_weights(path: str | Path, name: str = "custom") -> ModelSpec:
    buf = Path(path).read_bytes()
    (count,) = struct.unpack_from("<I", buf, 0)
    dims = [struct.unpack_from("<II", buf, 4 + 8 * i) for i in range(count)]
    off = 4 + 8 * count
    weights = []
    for din, dout in dims:
        w = np.frombuffer(buf, dtype="<f8", count=din * dout, offset=off).reshape(din, dout).astype(np.float64)
        off += 8 * din * dout
        b = np.frombuffer(buf, dtype="<f8", count=dout, offset=off).astype(np.float64)
        off += 8 * dout
        weights.append((w, b))
    chain = [dims[0][0]] + [d[1] for d in dims]
    return ModelSpec(name, layers_from_dims(chain), weights)
