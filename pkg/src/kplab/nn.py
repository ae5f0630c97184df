"""Small classifier architectures, SGD training with per-epoch snapshots,
feature taps and weight distances between snapshots."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NonFiniteError, TrainingError, UsageError
from .tensor import Tensor


# -- layer descriptors ----------------------------------------------------------
@dataclass(frozen=True)
class Conv:
    channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    tap: Optional[str] = None


@dataclass(frozen=True)
class Dense:
    width: int
    tap: Optional[str] = None


@dataclass(frozen=True)
class ReLU:
    tap: Optional[str] = None


@dataclass(frozen=True)
class Pool:
    size: int = 2
    tap: Optional[str] = None


@dataclass(frozen=True)
class Flatten:
    tap: Optional[str] = None


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layers, input shape ``(c, h, w)`` or ``(d,)`` and class count.

    A layer carrying ``tap="name"`` exposes its output as the feature
    ``name``.  Construction validates that shapes chain and that the last
    layer emits ``n_classes`` values.
    """

    input_shape: tuple
    layers: tuple
    n_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        shapes = self.layer_shapes()
        if int(np.prod(shapes[-1])) != self.n_classes or len(shapes[-1]) != 1:
            raise ConfigError(f"final layer emits {shapes[-1]}, expected ({self.n_classes},)")
        names = [l.tap for l in self.layers if l.tap]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate tap names {names}")

    def layer_shapes(self) -> list:
        """Output shape (without batch axis) after every layer."""
        shape = self.input_shape
        out = []
        for layer in self.layers:
            if isinstance(layer, Conv):
                if len(shape) != 3:
                    raise ConfigError(f"conv layer needs (c, h, w) input, got {shape}")
                c, h, w = shape
                k, s, p = layer.kernel, layer.stride, layer.pad
                if k > h + 2 * p or k > w + 2 * p or s < 1:
                    raise ConfigError(f"conv kernel {k} does not fit {shape}")
                shape = (layer.channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
            elif isinstance(layer, Pool):
                if len(shape) != 3 or shape[1] % layer.size or shape[2] % layer.size:
                    raise ConfigError(f"pool {layer.size} does not divide {shape}")
                shape = (shape[0], shape[1] // layer.size, shape[2] // layer.size)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Dense):
                if len(shape) != 1:
                    raise ConfigError(f"dense layer needs flat input, got {shape}")
                shape = (layer.width,)
            elif not isinstance(layer, ReLU):
                raise ConfigError(f"unknown layer {layer!r}")
            out.append(shape)
        return out

    @property
    def taps(self) -> dict:
        return {l.tap: i for i, l in enumerate(self.layers) if l.tap}

    def tap_index(self, tap: str) -> int:
        try:
            return self.taps[tap]
        except KeyError:
            raise UsageError(f"unknown tap {tap!r}; available: {sorted(self.taps)}") from None

    def tap_dim(self, tap: str) -> int:
        return int(np.prod(self.layer_shapes()[self.tap_index(tap)]))

    def param_shapes(self) -> list:
        """``(layer_index, shape)`` for every parameter array, in storage order."""
        out = []
        shape = self.input_shape
        for i, (layer, after) in enumerate(zip(self.layers, self.layer_shapes())):
            if isinstance(layer, Conv):
                out.append((i, (layer.channels, shape[0], layer.kernel, layer.kernel)))
                out.append((i, (layer.channels,)))
            elif isinstance(layer, Dense):
                out.append((i, (shape[0], layer.width)))
                out.append((i, (layer.width,)))
            shape = after
        return out

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_shapes())

    def layer_mask(self, predicate: Callable[[int], bool]) -> np.ndarray:
        """Boolean mask over the flat parameter vector selecting layers where ``predicate(index)``."""
        parts = [np.full(int(np.prod(s)), bool(predicate(i))) for i, s in self.param_shapes()]
        return np.concatenate(parts) if parts else np.zeros(0, bool)


def default_spec(n_classes: int, input_shape=(1, 32, 32)) -> ModelSpec:
    """Two conv blocks then three dense layers, with taps conv_top/fc1/fc2/fc3."""
    return ModelSpec(
        input_shape=input_shape,
        layers=(
            Conv(8), ReLU(), Pool(2),
            Conv(16), ReLU(), Pool(2, tap="conv_top"),
            Flatten(),
            Dense(64), ReLU(tap="fc1"),
            Dense(32), ReLU(tap="fc2"),
            Dense(n_classes, tap="fc3"),
        ),
        n_classes=n_classes,
    )


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """He-scaled Gaussian weights, zero biases, as one flat vector."""
    parts = []
    for _, shape in spec.param_shapes():
        if len(shape) == 1:
            parts.append(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            parts.append(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in))
    return np.concatenate([p.ravel() for p in parts])


def unflatten(spec: ModelSpec, vec: np.ndarray) -> list:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (spec.n_params,):
        raise DimensionError(f"parameter vector has {vec.shape}, spec needs ({spec.n_params},)")
    out, pos = [], 0
    for _, shape in spec.param_shapes():
        n = int(np.prod(shape))
        out.append(vec[pos:pos + n].reshape(shape))
        pos += n
    return out


def forward(spec: ModelSpec, params, x, start: int = 0, stop: Optional[int] = None) -> Tensor:
    """Run layers ``start .. stop`` (inclusive) on a batch ``x``.

    ``params`` is a flat vector or a list of arrays/Tensors as returned by
    :func:`unflatten`.
    """
    if isinstance(params, np.ndarray):
        params = unflatten(spec, params)
    params = [p if isinstance(p, Tensor) else Tensor(p) for p in params]
    stop = len(spec.layers) - 1 if stop is None else stop
    owner = {}
    for k, (i, _) in enumerate(spec.param_shapes()):
        owner.setdefault(i, []).append(params[k])
    h = T.as_tensor(x)
    for i in range(start, stop + 1):
        layer = spec.layers[i]
        if isinstance(layer, Conv):
            w, b = owner[i]
            h = T.conv2d(h, w, b, stride=layer.stride, pad=layer.pad)
        elif isinstance(layer, Dense):
            w, b = owner[i]
            h = h @ w + b
        elif isinstance(layer, ReLU):
            h = T.relu(h)
        elif isinstance(layer, Pool):
            h = T.avg_pool2d(h, layer.size)
        elif isinstance(layer, Flatten):
            h = h.reshape(h.shape[0], -1)
    return h


@dataclass
class Network:
    """A spec with a frozen flat parameter vector."""

    spec: ModelSpec
    params: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        unflatten(self.spec, self.params)
        self._arrays = [Tensor(a) for a in unflatten(self.spec, self.params)]

    def feature_fn(self, tap: str) -> Callable[[Tensor], Tensor]:
        """Differentiable map from an input batch to flattened tap features ``[n, d]``."""
        stop = self.spec.tap_index(tap)
        arrays = self._arrays

        def f(x):
            h = forward(self.spec, arrays, x, stop=stop)
            return h.reshape(h.shape[0], -1)

        return f

    def logits(self, x) -> np.ndarray:
        with T.no_grad():
            return forward(self.spec, self._arrays, x).data

    def accuracy(self, images, labels) -> float:
        return accuracy(self.spec, self.params, images, labels)


def extract_feature(params, spec: ModelSpec, tap: str, x) -> np.ndarray:
    """Tap activation for one sample (flat vector) or a batch (``[n, d]``)."""
    stop = spec.tap_index(tap)
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    single = x.shape == spec.input_shape
    if single:
        x = x[None]
    if x.shape[1:] != spec.input_shape:
        raise DimensionError(f"input {x.shape} does not match spec input {spec.input_shape}")
    with T.no_grad():
        h = forward(spec, params, x, stop=stop).data
    h = h.reshape(h.shape[0], -1)
    return h[0] if single else h


def accuracy(spec: ModelSpec, params, images, labels, batch: int = 256) -> float:
    labels = np.asarray(labels)
    hits = 0
    with T.no_grad():
        arrays = [Tensor(a) for a in unflatten(spec, params)]
        for s in range(0, len(labels), batch):
            z = forward(spec, arrays, images[s:s + batch]).data
            hits += int(np.sum(z.argmax(axis=1) == labels[s:s + batch]))
    return hits / len(labels)


# -- training -------------------------------------------------------------------
@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")


@dataclass
class CheckpointSeries:
    """Parameter snapshots ``w_0 .. w_M`` (row k = after epoch k) plus metadata."""

    weights: np.ndarray
    seed: int = 0
    loss_curve: list = field(default_factory=list)
    accuracy: Optional[float] = None
    phase: str = "train"

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        if not np.linalg.norm(self.weights[0]) > 0:
            raise ConfigError("initial parameters are all zero")

    @property
    def epochs(self) -> int:
        return self.weights.shape[0] - 1

    @property
    def n_params(self) -> int:
        return self.weights.shape[1]

    def __getitem__(self, k) -> np.ndarray:
        return self.weights[k]

    @property
    def final(self) -> np.ndarray:
        return self.weights[-1]


def sgd_series(
    spec: ModelSpec,
    w0: np.ndarray,
    n_samples: int,
    cfg: TrainConfig,
    batch_loss: Callable[[list, np.ndarray], Tensor],
    trainable: Optional[np.ndarray] = None,
    phase: str = "train",
    on_step: Optional[Callable[[list], None]] = None,
) -> CheckpointSeries:
    """Momentum SGD over shuffled mini-batches, snapshotting after every epoch.

    ``batch_loss(param_tensors, batch_indices)`` builds the scalar loss.
    Parameters outside ``trainable`` are passed as constants and never move.
    """
    if n_samples < 1:
        raise ConfigError("dataset is empty")
    rng = np.random.default_rng([cfg.seed, 0x5D])
    w = np.array(w0, dtype=np.float64)
    mask = np.ones(w.size, bool) if trainable is None else np.asarray(trainable, bool)
    shapes = spec.param_shapes()
    piece_trainable = []
    pos = 0
    for _, s in shapes:
        n = int(np.prod(s))
        piece_trainable.append(bool(mask[pos:pos + n].any()))
        pos += n
    vel = np.zeros_like(w)
    weights, losses = [w.copy()], []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n_samples)
        total = 0.0
        for s in range(0, n_samples, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            tensors = [Tensor(a, requires_grad=t) for a, t in zip(unflatten(spec, w), piece_trainable)]
            try:
                loss = batch_loss(tensors, idx)
                loss.backward()
            except NonFiniteError as exc:
                raise TrainingError(f"loss diverged ({exc})", epoch) from exc
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError("loss diverged", epoch)
            if on_step is not None:
                on_step(tensors)
            g = np.concatenate([
                (t.grad if t.grad is not None else np.zeros(t.shape)).ravel() for t in tensors])
            vel[mask] = cfg.momentum * vel[mask] + g[mask]
            w[mask] = w[mask] - cfg.lr * vel[mask]
            if not np.all(np.isfinite(w)):
                raise TrainingError("parameters became non-finite", epoch)
            total += value * len(idx)
        losses.append(total / n_samples)
        weights.append(w.copy())
    return CheckpointSeries(np.stack(weights), seed=cfg.seed, loss_curve=losses, phase=phase)


def train(spec: ModelSpec, data, cfg: TrainConfig, init: Optional[np.ndarray] = None) -> CheckpointSeries:
    """Train from scratch with softmax cross-entropy.

    ``data`` needs ``images`` ``[n, *input_shape]`` and integer ``labels``.
    ``init`` overrides the seeded He initialisation.
    """
    images = np.asarray(data.images, dtype=np.float64)
    labels = np.asarray(data.labels)
    if len(labels) == 0:
        raise ConfigError("dataset is empty")
    if images.shape[1:] != spec.input_shape:
        raise DimensionError(f"images {images.shape[1:]} do not match spec input {spec.input_shape}")
    w0 = init_params(spec, np.random.default_rng([cfg.seed, 0x1A])) if init is None else init

    def batch_loss(tensors, idx):
        return T.softmax_crossentropy(forward(spec, tensors, images[idx]), labels[idx])

    series = sgd_series(spec, w0, len(labels), cfg, batch_loss)
    series.accuracy = accuracy(spec, series.final, images, labels)
    return series


def weight_distance(series, m: int) -> float:
    """``sum_{k=1..m} ||w_k - w_{k-1}|| / ||w_0||`` with L2 norms over all parameters."""
    w = series.weights if isinstance(series, CheckpointSeries) else np.atleast_2d(np.asarray(series, float))
    if not 0 <= m <= w.shape[0] - 1:
        raise IndexError(f"epoch {m} outside [0, {w.shape[0] - 1}]")
    return float(weight_distances(w[:m + 1])[m])


def weight_distances(series) -> np.ndarray:
    """Cumulative weight distance for every epoch 0..M."""
    w = series.weights if isinstance(series, CheckpointSeries) else np.atleast_2d(np.asarray(series, float))
    steps = np.linalg.norm(np.diff(w, axis=0), axis=1) / np.linalg.norm(w[0])
    return np.concatenate([[0.0], np.cumsum(steps)])


def rescale_layers(spec: ModelSpec, params, layer: int, c: float) -> np.ndarray:
    """Multiply weights and bias of parametric layer ``layer`` by ``c`` and the
    weights of the next parametric layer by ``1/c``.

    Only ReLU, pooling and flatten may sit between the two, all positively
    homogeneous, so the network function is unchanged for ``c > 0``.  The
    bias of the second layer is left alone: scaling it would shift the output.
    """
    if c <= 0:
        raise ConfigError("rescale factor must be positive")
    if not isinstance(spec.layers[layer], (Conv, Dense)):
        raise ConfigError(f"layer {layer} has no parameters")
    nxt = next((i for i in range(layer + 1, len(spec.layers))
                if isinstance(spec.layers[i], (Conv, Dense))), None)
    if nxt is None:
        raise ConfigError(f"no parametric layer after layer {layer}")
    arrays = [a.copy() for a in unflatten(spec, params)]
    for k, (i, shape) in enumerate(spec.param_shapes()):
        if i == layer:
            arrays[k] *= c
        elif i == nxt and len(shape) > 1:
            arrays[k] /= c
    return np.concatenate([a.ravel() for a in arrays])
