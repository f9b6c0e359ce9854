"""Dense float64 kernels with hand-written backward rules.

Arrays follow the layout ``(..., T, D)``: the second-to-last axis is time
(frames), the last axis is the feature dimension. Any leading axes are batch
axes and broadcast like ordinary numpy operations, which lets the same kernels
serve a single clip, a batch of clip pairs and a full probe x gallery grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import DimensionError

__all__ = [
    "LinearLayer",
    "GradReport",
    "linear_forward",
    "linear_backward",
    "softmax_temporal",
    "softmax_temporal_backward",
    "weighted_sum",
    "weighted_sum_backward",
    "column_mean",
    "column_mean_backward",
    "column_max",
    "column_max_backward",
    "sigmoid",
    "softplus",
    "sum_to_shape",
    "numeric_gradient",
    "relative_error",
    "check_gradients",
    "grad_check",
    "register_op",
]


@dataclass
class LinearLayer:
    """Affine map ``x @ weight + bias`` with weight stored as (in_dim, out_dim)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise DimensionError(
                f"inconsistent layer shapes: weight {self.weight.shape}, bias {self.bias.shape}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init_uniform(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "LinearLayer":
        bound = np.sqrt(1.0 / in_dim)
        return cls(rng.uniform(-bound, bound, size=(in_dim, out_dim)), np.zeros(out_dim))

    def copy(self) -> "LinearLayer":
        return LinearLayer(self.weight.copy(), self.bias.copy())


def linear_forward(x: np.ndarray, layer: LinearLayer) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_dim:
        raise DimensionError(f"input has {x.shape[-1]} columns, layer expects {layer.in_dim}")
    return x @ layer.weight + layer.bias


def linear_backward(x: np.ndarray, layer: LinearLayer, grad_out: np.ndarray):
    """Return ``(grad_x, grad_weight, grad_bias)``; leading axes are summed out."""
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if x.shape[-1] != layer.in_dim or grad_out.shape[-1] != layer.out_dim:
        raise DimensionError("linear_backward shapes do not match the layer")
    if x.shape[:-1] != grad_out.shape[:-1]:
        raise DimensionError(f"x {x.shape} and grad_out {grad_out.shape} disagree")
    grad_x = grad_out @ layer.weight.T
    x2 = x.reshape(-1, layer.in_dim)
    g2 = grad_out.reshape(-1, layer.out_dim)
    return grad_x, x2.T @ g2, g2.sum(axis=0)


def softmax_temporal(logits: np.ndarray) -> np.ndarray:
    """Softmax over the time axis (-2), independently per feature column."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim < 2 or logits.shape[-2] < 1:
        raise DimensionError("softmax_temporal needs at least one temporal position")
    z = logits - logits.max(axis=-2, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-2, keepdims=True)


def softmax_temporal_backward(out: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if out.shape != grad_out.shape:
        raise DimensionError(f"softmax output {out.shape} vs grad {grad_out.shape}")
    inner = (grad_out * out).sum(axis=-2, keepdims=True)
    return out * (grad_out - inner)


def weighted_sum(weights: np.ndarray, frames: np.ndarray) -> np.ndarray:
    """``out[..., d] = sum_t weights[..., t, d] * frames[..., t, d]``."""
    if np.shape(weights)[-2:] != np.shape(frames)[-2:]:
        raise DimensionError(f"weights {np.shape(weights)} vs frames {np.shape(frames)}")
    try:
        return (weights * frames).sum(axis=-2)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None


def weighted_sum_backward(weights, frames, grad_out):
    """Gradients w.r.t. (weights, frames), reduced to their own shapes."""
    g = np.asarray(grad_out)[..., None, :]
    return sum_to_shape(frames * g, np.shape(weights)), sum_to_shape(weights * g, np.shape(frames))


def column_mean(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise DimensionError("column_mean needs at least one row")
    return x.mean(axis=-2)


def column_mean_backward(shape, grad_out: np.ndarray) -> np.ndarray:
    T = shape[-2]
    return np.broadcast_to(np.asarray(grad_out)[..., None, :] / T, shape).copy()


def column_max(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).max(axis=-2)


def column_max_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # ties route the gradient to the earliest frame
    idx = np.argmax(x, axis=-2)[..., None, :]
    g = np.zeros(np.shape(x))
    np.put_along_axis(g, idx, np.asarray(grad_out)[..., None, :], axis=-2)
    return g


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x):
    """``log(1 + exp(x))`` without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sum_to_shape(g: np.ndarray, shape) -> np.ndarray:
    """Undo numpy broadcasting by summing ``g`` down to ``shape``."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradReport:
    op_name: str
    max_rel_error: float
    worst_index: tuple
    passed: bool
    tolerance: float = 0.0
    n_checked: int = 0

    def to_dict(self) -> dict:
        return {
            "op_name": self.op_name,
            "max_rel_error": self.max_rel_error,
            "worst_index": [str(i) for i in self.worst_index],
            "pass": self.passed,
            "tolerance": self.tolerance,
            "n_checked": self.n_checked,
        }


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_gradient(fun: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fun()`` w.r.t. every element of ``x``.

    ``x`` is perturbed in place and restored, so ``fun`` should close over it.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    grad = np.zeros(x.shape)
    flat = x.reshape(-1)
    if not np.shares_memory(flat, x):
        raise ValueError("x must be contiguous so it can be perturbed in place")
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fun()
        flat[i] = orig - h
        fm = fun()
        flat[i] = orig
        grad.flat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_gradients(fun: Callable[[], float], arrays: Mapping[str, np.ndarray],
                    analytic: Mapping[str, np.ndarray], *, h: float = 1e-5,
                    tol: float = 1e-5, op_name: str = "graph") -> GradReport:
    """Compare analytic gradients for several named arrays in one report."""
    worst, worst_idx, count = 0.0, (), 0
    for name, arr in arrays.items():
        num = numeric_gradient(fun, arr, h)
        ana = np.asarray(analytic[name], dtype=np.float64)
        if ana.shape != arr.shape:
            raise DimensionError(f"analytic gradient for {name} has shape {ana.shape}")
        rel = relative_error(ana, num)
        count += rel.size
        if rel.size and rel.max() > worst:
            worst = float(rel.max())
            worst_idx = (name,) + tuple(int(i) for i in np.unravel_index(rel.argmax(), rel.shape))
    return GradReport(op_name, worst, worst_idx, bool(worst <= tol), tol, count)


# Named ops for grad_check. A factory receives (input, rng) and returns
# (scalar_fun, analytic_grad) where scalar_fun(x) = sum(R * op(x)) for a
# fixed random projection R.
_OPS: dict[str, Callable] = {}


def register_op(name: str):
    def deco(factory):
        _OPS[name] = factory
        return factory
    return deco


@register_op("linear")
def _linear_op(x, rng):
    layer = LinearLayer(rng.standard_normal((x.shape[-1], 3)), rng.standard_normal(3))
    R = rng.standard_normal(x.shape[:-1] + (3,))
    return (lambda v: float((R * linear_forward(v, layer)).sum()),
            lambda v: linear_backward(v, layer, R)[0])


@register_op("softmax_temporal")
def _softmax_op(x, rng):
    R = rng.standard_normal(x.shape)
    return (lambda v: float((R * softmax_temporal(v)).sum()),
            lambda v: softmax_temporal_backward(softmax_temporal(v), R))


@register_op("weighted_sum")
def _wsum_op(x, rng):
    frames = rng.standard_normal(x.shape)
    R = rng.standard_normal(x.shape[:-2] + x.shape[-1:])
    return (lambda v: float((R * weighted_sum(v, frames)).sum()),
            lambda v: weighted_sum_backward(v, frames, R)[0])


@register_op("column_mean")
def _mean_op(x, rng):
    R = rng.standard_normal(x.shape[:-2] + x.shape[-1:])
    return (lambda v: float((R * column_mean(v)).sum()),
            lambda v: column_mean_backward(v.shape, R))


@register_op("column_max")
def _max_op(x, rng):
    R = rng.standard_normal(x.shape[:-2] + x.shape[-1:])
    return (lambda v: float((R * column_max(v)).sum()),
            lambda v: column_max_backward(v, R))


def grad_check(op, x, h: float = 1e-5, tol: float = 1e-5, *, seed: int = 0) -> GradReport:
    """Check a registered op (by name) or a ``(fun, grad)`` pair at ``x``."""
    x = np.array(x, dtype=np.float64)
    if isinstance(op, str):
        if op not in _OPS:
            raise KeyError(f"unknown op {op!r}; known: {sorted(_OPS)}")
        fun, grad = _OPS[op](x, np.random.default_rng(seed))
        name = op
    else:
        fun, grad = op
        name = getattr(fun, "__name__", "op")
    analytic = grad(x.copy())
    return check_gradients(lambda: fun(x), {"input": x}, {"input": analytic},
                           h=h, tol=tol, op_name=name)
