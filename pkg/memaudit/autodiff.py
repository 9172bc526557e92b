"""
Autodiff: Reverse-mode automatic differentiation over numpy arrays.

Every primitive op returns a Tensor that remembers its parents and a closure
computing the vector-Jacobian product. `Tensor.backward()` walks the recorded
graph in reverse topological order. Layer-sized primitives (linear, conv2d,
batchnorm) are fused so that one training step records a few dozen nodes.

Contract: nn-core v1.0.0
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import ShapeError, TapeError

_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "memaudit_grad_enabled", default=True
)
_SAMPLE_NORMS: contextvars.ContextVar[Optional[dict]] = contextvars.ContextVar(
    "memaudit_sample_norms", default=None
)

Backward = Callable[[np.ndarray], None]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference only)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


@contextlib.contextmanager
def per_sample_norms() -> Iterator[dict[str, np.ndarray]]:
    """
    Collect per-sample squared gradient norms while backward runs.

    Yields a dict mapping parameter name -> array[batch]. The loss must be a
    sum over samples so that row i of every upstream gradient belongs to
    sample i alone.
    """
    collector: dict[str, np.ndarray] = {}
    token = _SAMPLE_NORMS.set(collector)
    try:
        yield collector
    finally:
        _SAMPLE_NORMS.reset(token)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


class Tensor:
    """n-dimensional array that participates in the gradient tape."""

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[Backward] = None,
    ):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.data: np.ndarray = data
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{nm})"

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Backpropagate from this tensor through the recorded graph."""
        if self._backward is None:
            raise TapeError(f"{self!r} has no recorded graph to backpropagate through")

        if grad is None:
            if self.data.size != 1:
                raise TapeError("grad must be provided for non-scalar outputs")
            grad = np.ones_like(self.data)

        # Iterative topological sort
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = None
        self.accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node is not self and node._parents:
                    # intermediate grads are dead once propagated
                    node.grad = None


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Backward) -> Tensor:
    if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _record_sample_norm(param: Tensor, values: np.ndarray) -> None:
    collector = _SAMPLE_NORMS.get()
    if collector is None or not param.requires_grad:
        return
    key = param.name or f"tensor_{id(param)}"
    if key in collector:
        collector[key] = collector[key] + values
    else:
        collector[key] = values


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x)
    return Tensor(arr)


# ------------------------------
# Layer primitives
# ------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x[n, in] @ w[in, out] + b[out]."""
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with kernel {w.shape}")
    out = x.data @ w.data + b.data

    def _bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(g @ w.data.T)
        if w.requires_grad:
            w.accumulate(x.data.T @ g)
            # ||outer(x_i, g_i)||^2 == ||x_i||^2 * ||g_i||^2
            _record_sample_norm(w, np.sum(x.data ** 2, axis=1) * np.sum(g ** 2, axis=1))
        if b.requires_grad:
            b.accumulate(g.sum(axis=0))
            _record_sample_norm(b, np.sum(g ** 2, axis=1))

    return _make(out, (x, w, b), _bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Valid-padding, stride-1 convolution. x[n,H,W,C], w[kh,kw,C,F], b[F]."""
    if x.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    n, h, wd, _ = x.shape
    kh, kw, _, f = w.shape
    ho, wo = h - kh + 1, wd - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{wd}")

    out = np.zeros((n, ho, wo, f), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            out += x.data[:, i:i + ho, j:j + wo, :] @ w.data[i, j]
    out += b.data

    def _bw(g: np.ndarray) -> None:
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    dx[:, i:i + ho, j:j + wo, :] += g @ w.data[i, j].T
            x.accumulate(dx)
        if w.requires_grad:
            dw = np.empty_like(w.data)
            per_sample = _SAMPLE_NORMS.get() is not None
            if per_sample:
                gw = np.empty((n, kh, kw) + w.shape[2:], dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    xs = x.data[:, i:i + ho, j:j + wo, :]
                    dw[i, j] = np.tensordot(xs, g, axes=([0, 1, 2], [0, 1, 2]))
                    if per_sample:
                        gw[:, i, j] = np.einsum("nhwc,nhwf->ncf", xs, g)
            w.accumulate(dw)
            if per_sample:
                _record_sample_norm(w, np.sum(gw ** 2, axis=(1, 2, 3, 4)))
        if b.requires_grad:
            b.accumulate(g.sum(axis=(0, 1, 2)))
            _record_sample_norm(b, np.sum(g.sum(axis=(1, 2)) ** 2, axis=1))

    return _make(out, (x, w, b), _bw)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling (stride == size); ties go to the first max."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects [n,H,W,C], got {x.shape}")
    n, h, wd, c = x.shape
    ho, wo = h // size, wd // size
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2d: pool {size} larger than input {h}x{wd}")

    cropped = x.data[:, :ho * size, :wo * size, :]
    windows = (
        cropped.reshape(n, ho, size, wo, size, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, ho, wo, c, size * size)
    )
    idx = np.argmax(windows, axis=-1)[..., None]
    out = np.take_along_axis(windows, idx, axis=-1)[..., 0]

    def _bw(g: np.ndarray) -> None:
        mask = np.zeros_like(windows)
        np.put_along_axis(mask, idx, g[..., None], axis=-1)
        spread = (
            mask.reshape(n, ho, wo, c, size, size)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, ho * size, wo * size, c)
        )
        dx = np.zeros_like(x.data)
        dx[:, :ho * size, :wo * size, :] = spread
        x.accumulate(dx)

    return _make(out, (x,), _bw)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def _bw(g: np.ndarray) -> None:
        x.accumulate(g * (x.data > 0))

    return _make(out, (x,), _bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def _bw(g: np.ndarray) -> None:
        x.accumulate(g.reshape(x.shape))

    return _make(out, (x,), _bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: surviving units are scaled by 1/(1-rate)."""
    if rate <= 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.data.dtype) / (1.0 - rate)
    out = x.data * mask

    def _bw(g: np.ndarray) -> None:
        x.accumulate(g * mask)

    return _make(out, (x,), _bw)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    epsilon: float,
    training: bool,
) -> tuple[Tensor, Optional[np.ndarray], Optional[np.ndarray]]:
    """
    Batch normalisation over every axis but the last (features/channels).

    Returns (output, batch_mean, batch_var); the batch statistics are None in
    eval mode, where only the running statistics are used.
    """
    axes = tuple(range(x.ndim - 1))
    sample_axes = tuple(range(1, x.ndim - 1))

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
    else:
        mean = running_mean.astype(x.data.dtype, copy=False)
        var = running_var.astype(x.data.dtype, copy=False)

    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (x.data - mean) * inv_std
    out = gamma.data * xhat + beta.data

    def _bw(g: np.ndarray) -> None:
        if training and _SAMPLE_NORMS.get() is not None:
            raise TapeError("per-sample gradient norms need eval-mode batch normalisation")
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).sum(axis=axes))
            _record_sample_norm(gamma, np.sum((g * xhat).sum(axis=sample_axes) ** 2, axis=1))
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=axes))
            _record_sample_norm(beta, np.sum(g.sum(axis=sample_axes) ** 2, axis=1))
        if x.requires_grad:
            dxhat = g * gamma.data
            if training:
                m = x.data.size / x.shape[-1]
                dx = (inv_std / m) * (
                    m * dxhat
                    - dxhat.sum(axis=axes)
                    - xhat * (dxhat * xhat).sum(axis=axes)
                )
            else:
                dx = dxhat * inv_std
            x.accumulate(dx)

    result = _make(out, (x, gamma, beta), _bw)
    if training:
        return result, mean, var
    return result, None, None


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def _bw(g: np.ndarray) -> None:
        x.accumulate(s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _make(s, (x,), _bw)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    """
    Fused softmax + cross-entropy on logits.

    Gradient w.r.t. logits is (p - onehot(y)) / b for reduction="mean".
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction: {reduction}")
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {n}")
    if n and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(f"labels out of range [0, {logits.shape[1]})")

    logp = log_softmax(logits.data)
    picked = -logp[np.arange(n), labels]
    total = picked.sum()
    loss = total / n if reduction == "mean" else total
    scale = 1.0 / n if reduction == "mean" else 1.0

    def _bw(g: np.ndarray) -> None:
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        logits.accumulate(p * (g * scale))

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), _bw)
