"""The patch-classification network: architecture description, layer stack,
initialization, prediction and checkpoint I/O.

The default :class:`ArchitectureSpec` is the four-block network. Each block
is Conv(k x k, 'same') -> ReLU -> BatchNorm -> MaxPool(2x2), followed by
Flatten, three Dense -> ReLU -> Dropout stages and a Dense -> Softmax output
layer.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn
from .errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    DimensionError,
)
from .tensor import flatten, resolve_dtype

ALLOWED_KERNELS = (3, 5, 7)


@dataclass(frozen=True)
class ArchitectureSpec:
    conv_blocks: tuple = ((32, 7), (64, 5), (96, 3), (128, 3))
    dense_units: tuple = (1024, 512, 256)
    dropout_rates: tuple = (0.25, 0.40, 0.40)
    num_classes: int = 5
    input_shape: tuple = (32, 32, 3)
    # False: Conv -> ReLU -> BN (activation attached to the conv layer).
    bn_before_activation: bool = False
    # 0.99 lags badly behind the weights at lr 1e-3 on small training sets
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        # normalize lists (e.g. from JSON) into tuples so specs hash and compare
        object.__setattr__(self, "conv_blocks", tuple((int(f), int(k)) for f, k in self.conv_blocks))
        object.__setattr__(self, "dense_units", tuple(int(u) for u in self.dense_units))
        object.__setattr__(self, "dropout_rates", tuple(float(r) for r in self.dropout_rates))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))

    def validate(self) -> None:
        if not self.conv_blocks:
            raise ConfigError("architecture needs at least one conv block")
        for filters, kernel in self.conv_blocks:
            if filters < 1:
                raise ConfigError(f"conv filters must be positive, got {filters}")
            if kernel not in ALLOWED_KERNELS:
                raise ConfigError(f"conv kernel {kernel} not in {ALLOWED_KERNELS}")
        if len(self.dropout_rates) != len(self.dense_units):
            raise ConfigError(
                f"{len(self.dense_units)} dense layers but {len(self.dropout_rates)} dropout rates"
            )
        if any(u < 1 for u in self.dense_units) or self.num_classes < 2:
            raise ConfigError("dense units must be positive and num_classes >= 2")
        for r in self.dropout_rates:
            if not 0.0 <= r < 1.0:
                raise ConfigError(f"dropout rate {r} outside [0, 1)")
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be (H, W, C), got {self.input_shape}")
        h, w, _ = self.input_shape
        div = 2 ** len(self.conv_blocks)
        if h % div or w % div:
            raise ConfigError(
                f"input spatial dims {h}x{w} not divisible by 2^{len(self.conv_blocks)} = {div}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_blocks"] = [list(b) for b in self.conv_blocks]
        d["dense_units"] = list(self.dense_units)
        d["dropout_rates"] = list(self.dropout_rates)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown architecture fields: {sorted(extra)}")
        return cls(**d)


DEFAULT_SPEC = ArchitectureSpec()

# Block-count study: filter sets as tabulated; kernels are 7, 5, then 3s.
TUNING_FILTERS = {
    3: (16, 32, 64),
    4: (32, 64, 32, 128),
    5: (32, 64, 32, 64, 128),
}


def variant_spec(filters, base: ArchitectureSpec = DEFAULT_SPEC) -> ArchitectureSpec:
    """Same dense head as ``base`` with a different conv stack."""
    kernels = [7, 5] + [3] * max(0, len(filters) - 2)
    blocks = tuple((int(f), k) for f, k in zip(filters, kernels))
    d = base.to_dict()
    d["conv_blocks"] = blocks
    return ArchitectureSpec.from_dict(d)


# -- layers ----------------------------------------------------------------


class Layer:
    kind = "layer"
    # False for activations, which the summary table folds into the layer before
    table_row = True

    def __init__(self, name: str):
        self.name = name
        self.grads: dict[str, np.ndarray] = {}

    def params(self) -> dict[str, np.ndarray]:
        """Trainable arrays keyed by name."""
        return {}

    def state(self) -> dict[str, np.ndarray]:
        """Every persisted array, trainable or not, in a fixed order."""
        return self.params()

    @property
    def num_params(self) -> int:
        return sum(a.size for a in self.state().values())

    def output_shape(self, shape: tuple) -> tuple:
        return shape

    def forward(self, x, mode, rng):
        raise NotImplementedError

    def backward(self, d):
        raise NotImplementedError


class Conv2D(Layer):
    kind = "Conv2D"

    def __init__(self, name, p: nn.Conv2DParams, first: bool = False):
        super().__init__(name)
        self.p = p
        self.first = first
        self._x = self._cols = None

    def params(self):
        return {"weights": self.p.weights, "bias": self.p.bias}

    def output_shape(self, shape):
        return shape[:-1] + (self.p.weights.shape[3],)

    def forward(self, x, mode, rng):
        cols = nn.im2col(x, self.p.kernel_size)
        if mode == nn.TRAIN:
            self._x, self._cols = x, cols
        return nn.conv2d_forward(x, self.p, cols=cols)

    def backward(self, d):
        dx, dw, db = nn.conv2d_backward(self._x, self.p, d, cols=self._cols, need_dx=not self.first)
        self.grads = {"weights": dw, "bias": db}
        self._x = self._cols = None
        return dx


class BatchNorm(Layer):
    kind = "BN"

    def __init__(self, name, p: nn.BatchNormParams):
        super().__init__(name)
        self.p = p
        self._x = self._cache = None

    def params(self):
        return {"gamma": self.p.gamma, "beta": self.p.beta}

    def state(self):
        return {
            "gamma": self.p.gamma,
            "beta": self.p.beta,
            "running_mean": self.p.running_mean,
            "running_var": self.p.running_var,
        }

    def forward(self, x, mode, rng):
        y, cache = nn.batchnorm_forward(x, self.p, mode)
        if mode == nn.TRAIN:
            self._x, self._cache = x, cache
        return y

    def backward(self, d):
        dx, dg, db = nn.batchnorm_backward(self._x, self.p, d, self._cache)
        self.grads = {"gamma": dg, "beta": db}
        self._x = self._cache = None
        return dx


class ReLU(Layer):
    kind = "ReLU"
    table_row = False

    def forward(self, x, mode, rng):
        if mode == nn.TRAIN:
            self._x = x
        return nn.relu(x)

    def backward(self, d):
        dx = nn.relu_backward(self._x, d)
        self._x = None
        return dx


class MaxPool2D(Layer):
    kind = "MP (2D)"

    def output_shape(self, shape):
        h, w, c = shape
        if h % 2 or w % 2:
            raise ConfigError(f"max-pool input {h}x{w} has an odd spatial dim")
        return (h // 2, w // 2, c)

    def forward(self, x, mode, rng):
        y, rec = nn.maxpool2d(x)
        if mode == nn.TRAIN:
            self._rec = rec
        return y

    def backward(self, d):
        dx = nn.maxpool2d_backward(d, self._rec)
        self._rec = None
        return dx


class Flatten(Layer):
    kind = "Flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, mode, rng):
        self._shape = x.shape
        return flatten(x)

    def backward(self, d):
        return d.reshape(self._shape)


class Dense(Layer):
    kind = "Dense"

    def __init__(self, name, p: nn.DenseParams):
        super().__init__(name)
        self.p = p
        self._x = None

    def params(self):
        return {"weights": self.p.weights, "bias": self.p.bias}

    def output_shape(self, shape):
        return (self.p.weights.shape[1],)

    def forward(self, x, mode, rng):
        if mode == nn.TRAIN:
            self._x = x
        return nn.dense_forward(x, self.p)

    def backward(self, d):
        dx, dw, db = nn.dense_backward(self._x, self.p, d)
        self.grads = {"weights": dw, "bias": db}
        self._x = None
        return dx


class Dropout(Layer):
    kind = "Dropout"

    def __init__(self, name, rate: float):
        super().__init__(name)
        self.rate = rate
        self.enabled = True
        self._mask = None

    def forward(self, x, mode, rng):
        active = mode == nn.TRAIN and self.enabled
        spec = nn.DropoutSpec(self.rate, nn.TRAIN if active else nn.INFER)
        y, mask = nn.dropout(x, spec, rng)
        self._mask = mask if mode == nn.TRAIN else None
        return y

    def backward(self, d):
        dx = nn.dropout_backward(d, self._mask)
        self._mask = None
        return dx


class Softmax(Layer):
    """Output activation. Only applied on the probability path; training
    differentiates the combined softmax + loss instead."""

    kind = "Softmax"
    table_row = False

    def forward(self, x, mode, rng):
        return nn.softmax(x)


# -- network ---------------------------------------------------------------


# The softmax layer is drawn at a tenth of the He scale so a fresh network
# starts close to the uniform prediction.
OUTPUT_INIT_GAIN = 0.1


def _he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype, gain: float = 1.0) -> np.ndarray:
    limit = gain * np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Network:
    """An initialized layer stack for one :class:`ArchitectureSpec`.

    ``layers`` ends with a :class:`Softmax`; :meth:`logits` stops just before
    it and :meth:`forward` returns probabilities.
    """

    def __init__(self, spec: ArchitectureSpec, layers: list[Layer], seed: int, dtype):
        self.spec = spec
        self.layers = layers
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.metadata: dict = {}
        self.rng = np.random.default_rng(np.random.SeedSequence([self.seed, 1]))

    # forward / backward

    def logits(self, batch: np.ndarray, mode: str = nn.INFER) -> np.ndarray:
        expected = self.spec.input_shape
        if batch.ndim != 4 or tuple(batch.shape[1:]) != expected:
            raise DimensionError(f"network expects N x {' x '.join(map(str, expected))} input, got {batch.shape}")
        x = np.asarray(batch, dtype=self.dtype)
        for layer in self.layers[:-1]:
            x = layer.forward(x, mode, self.rng)
        return x

    def forward(self, batch: np.ndarray, mode: str = nn.INFER) -> np.ndarray:
        return self.layers[-1].forward(self.logits(batch, mode), mode, self.rng)

    def backward(self, d_logits: np.ndarray) -> None:
        """Backpropagate a logit gradient; fills ``layer.grads`` for every layer."""
        d = d_logits
        for layer in reversed(self.layers[:-1]):
            d = layer.backward(d)

    def set_dropout(self, enabled: bool) -> None:
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.enabled = enabled

    # parameters

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Trainable arrays as ``(layer/name, array)`` in declaration order."""
        return [(f"{l.name}/{k}", a) for l in self.layers for k, a in l.params().items()]

    def gradients(self) -> list[np.ndarray]:
        """Gradients from the last :meth:`backward`, aligned with :meth:`parameters`."""
        return [l.grads[k] for l in self.layers for k in l.params()]

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Every persisted array (including batch-norm running stats)."""
        return [(f"{l.name}/{k}", a) for l in self.layers for k, a in l.state().items()]

    def parameter_counts(self) -> list[int]:
        """Parameter count of each parameterized layer, in order."""
        return [l.num_params for l in self.layers if l.state()]

    @property
    def num_params(self) -> int:
        return sum(self.parameter_counts())

    # shape tables

    def summary(self) -> list[tuple[str, tuple, int]]:
        """``(kind, output shape, params)`` rows by static shape propagation.

        Activation layers are folded into the preceding row. The batch axis
        is reported as ``None``.
        """
        rows = []
        shape = self.spec.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
            if layer.table_row:
                rows.append((layer.kind, (None,) + tuple(shape), layer.num_params))
        return rows

    def trace_shapes(self, batch: np.ndarray) -> list[tuple[str, tuple]]:
        """Run an infer-mode forward pass and record each table row's output shape."""
        rows = []
        x = np.asarray(batch, dtype=self.dtype)
        for layer in self.layers:
            x = layer.forward(x, nn.INFER, self.rng)
            if layer.table_row:
                rows.append((layer.kind, (None,) + tuple(x.shape[1:])))
        return rows

    def predict(self, batch: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return np.argmax(predict_proba(self, batch, batch_size), axis=1)


def predict_proba(net: Network, batch: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Infer-mode probabilities, evaluated in chunks."""
    if len(batch) == 0:
        return np.zeros((0, net.spec.num_classes), dtype=net.dtype)
    return np.concatenate(
        [net.forward(batch[i : i + batch_size], nn.INFER) for i in range(0, len(batch), batch_size)]
    )


def predict(net: Network, batch: np.ndarray) -> list[int]:
    """Class index of the most probable class per row (ties -> lower index)."""
    return [int(i) for i in net.predict(batch)]


def build(spec: ArchitectureSpec = DEFAULT_SPEC, seed: int = 0, precision="float32") -> Network:
    """Initialize a network: He-uniform weights (output layer scaled by
    ``OUTPUT_INIT_GAIN``), zero biases, unit BN scale, zero BN shift.

    Weights are drawn in float64 and cast, so the float32 and float64 builds
    of one ``(spec, seed)`` agree up to rounding.
    """
    spec.validate()
    dtype = resolve_dtype(precision)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    layers: list[Layer] = []
    h, w, cin = spec.input_shape
    act = lambda i: ReLU(f"relu_{i}")  # noqa: E731

    for i, (filters, k) in enumerate(spec.conv_blocks, start=1):
        conv = nn.Conv2DParams(
            weights=_he_uniform(rng, (k, k, cin, filters), k * k * cin, dtype),
            bias=np.zeros(filters, dtype),
        )
        bn = nn.BatchNormParams.init(filters, dtype, spec.bn_momentum, spec.bn_epsilon)
        conv_layer = Conv2D(f"conv2d_{i}", conv, first=i == 1)
        bn_layer = BatchNorm(f"batch_normalization_{i}", bn)
        if spec.bn_before_activation:
            layers += [conv_layer, bn_layer, act(i)]
        else:
            layers += [conv_layer, act(i), bn_layer]
        layers.append(MaxPool2D(f"max_pooling2d_{i}"))
        cin = filters
        h, w = h // 2, w // 2

    layers.append(Flatten("flatten"))
    fan_in = h * w * cin
    n_conv = len(spec.conv_blocks)
    for j, (units, rate) in enumerate(zip(spec.dense_units, spec.dropout_rates), start=1):
        p = nn.DenseParams(_he_uniform(rng, (fan_in, units), fan_in, dtype), np.zeros(units, dtype))
        layers += [Dense(f"dense_{j}", p), act(n_conv + j), Dropout(f"dropout_{j}", rate)]
        fan_in = units
    j = len(spec.dense_units) + 1
    p = nn.DenseParams(
        _he_uniform(rng, (fan_in, spec.num_classes), fan_in, dtype, OUTPUT_INIT_GAIN),
        np.zeros(spec.num_classes, dtype),
    )
    layers += [Dense(f"dense_{j}", p), Softmax("softmax")]
    return Network(spec, layers, seed, dtype)


# -- checkpoints -----------------------------------------------------------
#
# Layout:
#   line 1   b"ILDCNN-CHECKPOINT <format_version>\n"
#   line 2   compact JSON header (sorted keys) + b"\n"
#   payload  little-endian float32 blobs, concatenated in declaration order
#   trailer  b"END-ILDCNN\n"
#
# The header lists every blob's name and shape plus the payload byte count.

MAGIC = b"ILDCNN-CHECKPOINT"
TRAILER = b"END-ILDCNN\n"
FORMAT_VERSION = 1


def checkpoint_bytes(net: Network) -> bytes:
    blobs = net.state_arrays()
    header = {
        "blobs": [{"name": n, "shape": list(a.shape)} for n, a in blobs],
        "metadata": net.metadata,
        "payload_bytes": 4 * sum(a.size for _, a in blobs),
        "seed": net.seed,
        "spec": net.spec.to_dict(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in blobs)
    return MAGIC + b" %d\n" % FORMAT_VERSION + head + b"\n" + payload + TRAILER


def save(net: Network, path) -> None:
    """Write a checkpoint (parameters are stored as float32)."""
    Path(path).write_bytes(checkpoint_bytes(net))


def load_bytes(raw: bytes) -> Network:
    first_nl = raw.find(b"\n")
    if first_nl < 0:
        raise CheckpointTruncatedError("checkpoint ends inside the magic line")
    magic, _, version = raw[:first_nl].partition(b" ")
    if magic != MAGIC:
        raise CheckpointError("not an ILDCNN checkpoint (bad magic)")
    try:
        version = int(version)
    except ValueError:
        raise CheckpointError(f"unreadable format version {version!r}") from None
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")

    second_nl = raw.find(b"\n", first_nl + 1)
    if second_nl < 0:
        raise CheckpointTruncatedError("checkpoint ends inside the header")
    try:
        header = json.loads(raw[first_nl + 1 : second_nl])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    if not raw.endswith(TRAILER):
        raise CheckpointTruncatedError("checkpoint is truncated (missing trailer)")

    payload = raw[second_nl + 1 : len(raw) - len(TRAILER)]
    shapes = [tuple(b["shape"]) for b in header["blobs"]]
    expected = 4 * sum(int(np.prod(s)) for s in shapes)
    if header["payload_bytes"] != expected or len(payload) != expected:
        raise CheckpointShapeError(
            f"payload holds {len(payload)} bytes; header declares {header['payload_bytes']}, blob shapes need {expected}"
        )

    net = build(ArchitectureSpec.from_dict(header["spec"]), seed=header["seed"])
    targets = net.state_arrays()
    if [n for n, _ in targets] != [b["name"] for b in header["blobs"]]:
        raise CheckpointShapeError("checkpoint blob names do not match the architecture")
    offset = 0
    for (name, arr), shape in zip(targets, shapes):
        if arr.shape != shape:
            raise CheckpointShapeError(f"blob {name} has shape {shape}, architecture needs {arr.shape}")
        n = arr.size
        arr[...] = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
    net.metadata = header.get("metadata", {})
    return net


def load(path) -> Network:
    return load_bytes(Path(path).read_bytes())


def config_hash(config: dict) -> str:
    """Stable short hash of a flat configuration mapping."""
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
