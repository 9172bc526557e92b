"""
NN: Layer descriptors, the three audited architectures and the Model wrapper.

Contract: nn-core v1.0.0
"""

from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .autodiff import (
    Tensor,
    batchnorm,
    conv2d,
    linear,
    maxpool2d,
    no_grad,
    per_sample_norms,
    relu,
    reshape,
    softmax,
    softmax_cross_entropy,
    dropout as _dropout,
)
from .errors import ConfigError, NonFiniteError, ShapeError, TapeError

logger = logging.getLogger(__name__)

LAYER_KINDS = (
    "dense", "conv2d", "maxpool", "relu", "softmax", "dropout", "batchnorm", "flatten",
)
REGULARISERS = frozenset({"dropout", "batchnorm"})

DENSE_DROPOUT = 0.2
CONV_DROPOUT = 0.5
BN_MOMENTUM = 0.99
BN_EPSILON = 1e-3


@dataclass(frozen=True)
class LayerDescriptor:
    """One layer of an architecture; unused hyperparameters stay at defaults."""
    kind: str
    units: Optional[int] = None
    kernel_size: tuple[int, int] = (3, 3)
    stride: int = 1
    pool_size: int = 2
    rate: float = 0.0
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind: {self.kind}")
        if self.kind in ("dense", "conv2d") and (self.units is None or self.units < 1):
            raise ConfigError(f"{self.kind} needs a positive unit count")
        if self.kind == "conv2d" and self.stride != 1:
            raise ConfigError("conv2d supports stride 1 only")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.kind == "batchnorm":
            if not 0.0 < self.momentum < 1.0:
                raise ConfigError(f"batchnorm momentum must be in (0, 1), got {self.momentum}")
            if self.epsilon <= 0.0:
                raise ConfigError(f"batchnorm epsilon must be > 0, got {self.epsilon}")

    def to_dict(self) -> dict:
        return asdict(self)


def Dense(units: int) -> LayerDescriptor:
    return LayerDescriptor("dense", units=units)


def Conv2D(filters: int, kh: int = 3, kw: int = 3) -> LayerDescriptor:
    return LayerDescriptor("conv2d", units=filters, kernel_size=(kh, kw))


def MaxPool(size: int = 2) -> LayerDescriptor:
    return LayerDescriptor("maxpool", pool_size=size, stride=size)


def ReLU() -> LayerDescriptor:
    return LayerDescriptor("relu")


def Softmax() -> LayerDescriptor:
    return LayerDescriptor("softmax")


def Flatten() -> LayerDescriptor:
    return LayerDescriptor("flatten")


def Dropout(rate: float) -> LayerDescriptor:
    return LayerDescriptor("dropout", rate=rate)


def BatchNorm(momentum: float = BN_MOMENTUM, epsilon: float = BN_EPSILON) -> LayerDescriptor:
    return LayerDescriptor("batchnorm", momentum=momentum, epsilon=epsilon)


def _mlp1(num_classes: int) -> list[LayerDescriptor]:
    return [
        Flatten(),
        Dense(512), ReLU(),
        Dense(256), ReLU(),
        Dense(128), ReLU(),
        Dense(num_classes), Softmax(),
    ]


def _cnn1(num_classes: int) -> list[LayerDescriptor]:
    return [
        Conv2D(32), ReLU(),
        Conv2D(64), MaxPool(2), ReLU(),
        Flatten(),
        Dense(128), ReLU(),
        Dense(128), ReLU(),
        Dense(num_classes), Softmax(),
    ]


def _cnn2(num_classes: int) -> list[LayerDescriptor]:
    return [
        Conv2D(32), ReLU(),
        Conv2D(32), ReLU(),
        MaxPool(2),
        Conv2D(64), ReLU(),
        Conv2D(64), ReLU(),
        MaxPool(2),
        Flatten(),
        Dense(1024), ReLU(),
        Dense(num_classes), Softmax(),
    ]


ARCHITECTURES: dict[str, Callable[[int], list[LayerDescriptor]]] = {
    "MLP-1": _mlp1,
    "CNN-1": _cnn1,
    "CNN-2": _cnn2,
}

INPUT_SHAPES: dict[str, tuple[int, int, int]] = {
    "MLP-1": (28, 28, 1),
    "CNN-1": (28, 28, 1),
    "CNN-2": (32, 32, 3),
}


def apply_regularisers(
    layers: Sequence[LayerDescriptor],
    regularisers: frozenset[str] | set[str] = frozenset(),
) -> list[LayerDescriptor]:
    """
    Insert batchnorm before every ReLU and dropout after hidden activations.

    Dense activations get rate 0.2; a conv block (ending at a max-pool, or at
    the ReLU right after it) gets rate 0.5. The softmax layer is never touched.
    """
    unknown = set(regularisers) - REGULARISERS
    if unknown:
        raise ConfigError(f"unknown regularisers: {sorted(unknown)}")
    use_dropout = "dropout" in regularisers
    use_bn = "batchnorm" in regularisers

    out: list[LayerDescriptor] = []
    last_param_kind: Optional[str] = None
    for i, layer in enumerate(layers):
        prev = layers[i - 1] if i > 0 else None
        nxt = layers[i + 1] if i + 1 < len(layers) else None

        if layer.kind == "relu" and use_bn:
            out.append(BatchNorm())
        out.append(layer)

        if layer.kind in ("dense", "conv2d"):
            last_param_kind = layer.kind
        if not use_dropout:
            continue
        if layer.kind == "relu":
            if prev is not None and prev.kind == "maxpool":
                out.append(Dropout(CONV_DROPOUT))
            elif last_param_kind == "dense":
                out.append(Dropout(DENSE_DROPOUT))
        elif layer.kind == "maxpool" and (nxt is None or nxt.kind != "relu"):
            out.append(Dropout(CONV_DROPOUT))
    return out


def _glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Model:
    """
    Layer sequence with named parameters and a train/eval mode.

    Trainable parameters live in `params` (Tensors); batchnorm running
    statistics live in `state` (plain arrays). Initialisation is Glorot-uniform
    for kernels and zeros for biases, each parameter seeded from
    (seed, enumeration index).
    """

    def __init__(
        self,
        layers: Sequence[LayerDescriptor],
        input_shape: Sequence[int],
        num_classes: int,
        seed: int = 0,
        dtype=np.float32,
        architecture: str = "custom",
        regularisers: frozenset[str] = frozenset(),
    ):
        if num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
        self.layers: tuple[LayerDescriptor, ...] = tuple(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        self.architecture = architecture
        self.regularisers = frozenset(regularisers)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.mode = "eval"
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.state: dict[str, np.ndarray] = {}
        self._names: list[Optional[str]] = []
        self._tape: Optional[Tensor] = None
        self.last_loss: Optional[float] = None
        self._build()

    # ---- construction ----
    def _build(self) -> None:
        shape = self.input_shape
        counters: dict[str, int] = {}
        param_index = 0

        def add_param(name: str, value: np.ndarray) -> None:
            self.params[name] = Tensor(value, requires_grad=True, name=name)

        for pos, layer in enumerate(self.layers):
            kind = layer.kind
            idx = counters.get(kind, 0)
            counters[kind] = idx + 1
            name = f"{kind}_{idx}"
            self._names.append(name)

            if kind == "dense":
                if len(shape) != 1:
                    raise ShapeError(f"{name} needs flat input, got {shape}; add a flatten layer")
                fan_in, fan_out = shape[0], layer.units
                rng = np.random.default_rng([self.seed, param_index])
                add_param(f"{name}/kernel", _glorot_uniform(rng, (fan_in, fan_out), fan_in, fan_out, self.dtype))
                add_param(f"{name}/bias", np.zeros(fan_out, dtype=self.dtype))
                param_index += 2
                shape = (fan_out,)
            elif kind == "conv2d":
                if len(shape) != 3:
                    raise ShapeError(f"{name} needs [H,W,C] input, got {shape}")
                kh, kw = layer.kernel_size
                h, w, c = shape
                if h < kh or w < kw:
                    raise ShapeError(f"{name}: kernel {kh}x{kw} larger than input {h}x{w}")
                rng = np.random.default_rng([self.seed, param_index])
                kernel = _glorot_uniform(rng, (kh, kw, c, layer.units), kh * kw * c, kh * kw * layer.units, self.dtype)
                add_param(f"{name}/kernel", kernel)
                add_param(f"{name}/bias", np.zeros(layer.units, dtype=self.dtype))
                param_index += 2
                shape = (h - kh + 1, w - kw + 1, layer.units)
            elif kind == "maxpool":
                if len(shape) != 3:
                    raise ShapeError(f"{name} needs [H,W,C] input, got {shape}")
                h, w, c = shape
                shape = (h // layer.pool_size, w // layer.pool_size, c)
            elif kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif kind == "batchnorm":
                width = shape[-1]
                add_param(f"{name}/gamma", np.ones(width, dtype=self.dtype))
                add_param(f"{name}/beta", np.zeros(width, dtype=self.dtype))
                param_index += 2
                self.state[f"{name}/moving_mean"] = np.zeros(width, dtype=self.dtype)
                self.state[f"{name}/moving_variance"] = np.ones(width, dtype=self.dtype)
            elif kind == "softmax":
                if pos != len(self.layers) - 1:
                    raise ConfigError("softmax must be the final layer")

        if not self.layers or self.layers[-1].kind != "softmax":
            raise ConfigError("architecture must end with a softmax layer")
        if shape != (self.num_classes,):
            raise ShapeError(f"output shape {shape} does not match num_classes={self.num_classes}")

    # ---- introspection ----
    @property
    def param_count(self) -> int:
        """Number of trainable scalars."""
        return int(sum(p.data.size for p in self.params.values()))

    @property
    def hidden_widths(self) -> list[int]:
        dense = [l.units for l in self.layers if l.kind == "dense"]
        return dense[:-1]

    @property
    def model_id(self) -> str:
        regs = "+".join(sorted(self.regularisers)) or "none"
        return f"{self.architecture}[{regs}]"

    def parameters(self) -> dict[str, np.ndarray]:
        """Parameter arrays by name (live views, mutated in place by optimisers)."""
        return {name: t.data for name, t in self.params.items()}

    def train(self) -> "Model":
        self.mode = "train"
        return self

    def eval(self) -> "Model":
        self.mode = "eval"
        return self

    @property
    def training(self) -> bool:
        return self.mode == "train"

    # ---- forward ----
    def _run(self, batch, capture: Optional[int] = None) -> tuple[Tensor, Tensor, Optional[np.ndarray]]:
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.dtype))
        if x.ndim != len(self.input_shape) + 1 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"batch shape {x.shape} does not match model input {self.input_shape}")
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad)

        h = x
        logits: Optional[Tensor] = None
        captured: Optional[np.ndarray] = None
        for pos, (layer, name) in enumerate(zip(self.layers, self._names)):
            kind = layer.kind
            if kind == "dense":
                h = linear(h, self.params[f"{name}/kernel"], self.params[f"{name}/bias"])
            elif kind == "conv2d":
                h = conv2d(h, self.params[f"{name}/kernel"], self.params[f"{name}/bias"])
            elif kind == "maxpool":
                h = maxpool2d(h, layer.pool_size)
            elif kind == "relu":
                h = relu(h)
            elif kind == "flatten":
                h = reshape(h, (h.shape[0], -1))
            elif kind == "dropout":
                if self.training:
                    h = _dropout(h, layer.rate, self.rng)
            elif kind == "batchnorm":
                mean_key, var_key = f"{name}/moving_mean", f"{name}/moving_variance"
                h, bmean, bvar = batchnorm(
                    h,
                    self.params[f"{name}/gamma"],
                    self.params[f"{name}/beta"],
                    self.state[mean_key],
                    self.state[var_key],
                    layer.epsilon,
                    training=self.training,
                )
                if self.training:
                    m = layer.momentum
                    self.state[mean_key] = (m * self.state[mean_key] + (1 - m) * bmean).astype(self.dtype)
                    self.state[var_key] = (m * self.state[var_key] + (1 - m) * bvar).astype(self.dtype)
            elif kind == "softmax":
                logits = h
                h = softmax(h)
            if capture is not None and pos == capture:
                captured = h.data.copy()

        if not np.all(np.isfinite(h.data)):
            raise NonFiniteError("non-finite values in forward pass")
        return logits, h, captured

    def forward(self, batch) -> Tensor:
        """Probabilities for a batch [b, H, W, C]; records the tape for backward()."""
        logits, probs, _ = self._run(batch)
        self._tape = logits if logits.requires_grad else None
        return probs

    __call__ = forward

    def backward(self, labels) -> dict[str, np.ndarray]:
        """Gradients of mean cross-entropy for the last recorded forward pass."""
        if self._tape is None:
            raise TapeError("backward called without a recorded forward pass")
        logits, self._tape = self._tape, None

        loss = softmax_cross_entropy(logits, labels, reduction="mean")
        self.last_loss = float(loss.data)
        if not np.isfinite(self.last_loss):
            raise NonFiniteError(f"non-finite loss: {self.last_loss}")

        for p in self.params.values():
            p.grad = None
        loss.backward()

        grads: dict[str, np.ndarray] = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name}")
            grads[name] = g
            p.grad = None
        return grads

    def loss_and_grads(self, batch, labels) -> tuple[float, dict[str, np.ndarray]]:
        self.forward(batch)
        grads = self.backward(labels)
        return self.last_loss, grads

    def predict(self, images: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        """Eval-mode probabilities, computed in chunks without recording a tape."""
        previous = self.mode
        self.eval()
        try:
            chunks = []
            with no_grad():
                for start in range(0, len(images), batch_size):
                    _, probs, _ = self._run(images[start:start + batch_size])
                    chunks.append(probs.data)
        finally:
            self.mode = previous
        if not chunks:
            return np.zeros((0, self.num_classes), dtype=self.dtype)
        return np.concatenate(chunks, axis=0)

    def hidden_activations(self, images: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        """Eval-mode output of the last hidden ReLU (the second-last layer)."""
        relus = [i for i, l in enumerate(self.layers) if l.kind == "relu"]
        if not relus:
            raise ConfigError("model has no ReLU layer to capture")
        capture = relus[-1]
        previous = self.mode
        self.eval()
        try:
            chunks = []
            with no_grad():
                for start in range(0, len(images), batch_size):
                    _, _, acts = self._run(images[start:start + batch_size], capture=capture)
                    chunks.append(acts)
        finally:
            self.mode = previous
        return np.concatenate(chunks, axis=0)

    def per_sample_grad_sq_norms(self, images: np.ndarray, labels) -> np.ndarray:
        """
        Exact ||grad_w l(w, x_i, y_i)||^2 over all trainable parameters, per sample.

        Runs in eval mode so samples do not interact through batch statistics.
        """
        previous = self.mode
        self.eval()
        try:
            with per_sample_norms() as collected:
                logits, _, _ = self._run(images)
                loss = softmax_cross_entropy(logits, labels, reduction="sum")
                for p in self.params.values():
                    p.grad = None
                loss.backward()
        finally:
            self.mode = previous
            for p in self.params.values():
                p.grad = None
        total = np.zeros(len(images), dtype=np.float64)
        for values in collected.values():
            total += values
        if not np.all(np.isfinite(total)):
            raise NonFiniteError("non-finite per-sample gradient norms")
        return total

    # ---- weights ----
    def snapshot(self) -> dict[str, np.ndarray]:
        """Copy of every parameter and running statistic, in enumeration order."""
        snap = {name: t.data.copy() for name, t in self.params.items()}
        snap.update({name: arr.copy() for name, arr in self.state.items()})
        return snap

    def load_snapshot(self, snapshot: Mapping[str, np.ndarray]) -> "Model":
        expected = set(self.params) | set(self.state)
        missing = expected - set(snapshot)
        extra = set(snapshot) - expected
        if missing or extra:
            raise ShapeError(
                f"snapshot does not match model: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, t in self.params.items():
            arr = np.asarray(snapshot[name])
            if arr.shape != t.data.shape:
                raise ShapeError(f"{name}: snapshot shape {arr.shape} != parameter shape {t.data.shape}")
            t.data = arr.astype(self.dtype, copy=True)
        for name in self.state:
            arr = np.asarray(snapshot[name])
            if arr.shape != self.state[name].shape:
                raise ShapeError(f"{name}: snapshot shape {arr.shape} != state shape {self.state[name].shape}")
            self.state[name] = arr.astype(self.dtype, copy=True)
        return self

    def copy(self) -> "Model":
        clone = copy.copy(self)
        clone.params = {
            name: Tensor(t.data.copy(), requires_grad=True, name=name) for name, t in self.params.items()
        }
        clone.state = {name: arr.copy() for name, arr in self.state.items()}
        clone.rng = copy.deepcopy(self.rng)
        clone._tape = None
        return clone

    def astype(self, dtype) -> "Model":
        """Copy of the model with parameters and state cast to dtype."""
        clone = self.copy()
        clone.dtype = np.dtype(dtype)
        for t in clone.params.values():
            t.data = t.data.astype(clone.dtype)
        clone.state = {name: arr.astype(clone.dtype) for name, arr in clone.state.items()}
        return clone

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.snapshot().items():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def build_model(
    arch: str,
    num_classes: int = 10,
    regularisers: frozenset[str] | set[str] = frozenset(),
    seed: int = 0,
    dtype=np.float32,
) -> Model:
    """Build MLP-1, CNN-1 or CNN-2 with optional dropout/batchnorm."""
    if arch not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture: {arch} (expected one of {', '.join(ARCHITECTURES)})")
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    regularisers = frozenset(regularisers)
    layers = apply_regularisers(ARCHITECTURES[arch](num_classes), regularisers)
    model = Model(
        layers,
        INPUT_SHAPES[arch],
        num_classes,
        seed=seed,
        dtype=dtype,
        architecture=arch,
        regularisers=regularisers,
    )
    logger.debug("built %s with %d parameters", model.model_id, model.param_count)
    return model


def forward(model: Model, batch) -> Tensor:
    return model.forward(batch)


def backward(model: Model, labels) -> dict[str, np.ndarray]:
    return model.backward(labels)
