"""Binary verification loss and an OIM-style identity loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .errors import ContractError, DimensionError


@dataclass
class LossValue:
    value: float
    grads: dict = field(default_factory=dict)


def bce_with_logit(logit, label) -> LossValue:
    """Binary cross-entropy on a logit; ``grads['logit'] = sigmoid(logit) - label``.

    Works elementwise on arrays too, in which case ``value`` is the sum.
    """
    z = np.asarray(logit, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ContractError("logit must be finite")
    value = nk.softplus(z) - y * z
    g = nk.sigmoid(z) - y
    if z.ndim == 0:
        return LossValue(float(value), {"logit": float(g)})
    return LossValue(float(value.sum()), {"logit": g})


@dataclass
class OimTable:
    """Unit-norm identity prototypes updated by momentum (not by SGD)."""

    prototypes: np.ndarray
    momentum: float = 0.5
    temperature: float = 0.1

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def n_identities(self) -> int:
        return self.prototypes.shape[0]

    @classmethod
    def random(cls, n_identities: int, dim: int, rng: np.random.Generator, **kw) -> "OimTable":
        p = rng.standard_normal((n_identities, dim))
        return cls(p / np.linalg.norm(p, axis=1, keepdims=True), **kw)

    def copy(self) -> "OimTable":
        return OimTable(self.prototypes.copy(), self.momentum, self.temperature)


def _normalize(v: np.ndarray):
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ContractError("cannot normalise a zero-norm feature")
    return v / norm, norm


def oim_forward(feature: np.ndarray, identity, table: OimTable) -> LossValue:
    """Softmax cross-entropy over cosine similarities to the prototype table.

    ``feature`` may be a single vector or a stack of rows with one identity
    each; the value is summed over rows and ``grads['feature']`` has the
    feature's shape. Prototypes are constants here.
    """
    f = np.asarray(feature, dtype=np.float64)
    ids = np.atleast_1d(np.asarray(identity, dtype=np.int64))
    if f.shape[-1] != table.prototypes.shape[1]:
        raise DimensionError("feature width does not match the prototype table")
    if np.any(ids < 0) or np.any(ids >= table.n_identities):
        raise ContractError(f"identity out of range for a table of {table.n_identities}")
    rows = f.reshape(-1, f.shape[-1])
    x, norm = _normalize(rows)
    logits = x @ table.prototypes.T / table.temperature
    logits = logits - logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    idx = np.arange(rows.shape[0])
    value = -logp[idx, ids].sum()
    p = np.exp(logp)
    p[idx, ids] -= 1.0
    g_x = p @ table.prototypes / table.temperature
    # through x = f / |f|
    g_f = (g_x - (g_x * x).sum(axis=1, keepdims=True) * x) / norm
    return LossValue(float(value), {"feature": g_f.reshape(f.shape)})


def oim_update(table: OimTable, feature: np.ndarray, identity) -> OimTable:
    """Momentum update of the matching prototype rows, in place; returns the table."""
    f = np.asarray(feature, dtype=np.float64).reshape(-1, table.prototypes.shape[1])
    ids = np.atleast_1d(np.asarray(identity, dtype=np.int64))
    if np.any(ids < 0) or np.any(ids >= table.n_identities):
        raise ContractError(f"identity out of range for a table of {table.n_identities}")
    x, _ = _normalize(f)
    if table.momentum == 1.0:
        return table
    for row, i in zip(x, ids):
        mixed = table.momentum * table.prototypes[i] + (1.0 - table.momentum) * row
        n = np.linalg.norm(mixed)
        # opposite unit vectors at momentum 0.5 cancel exactly; keep the old row
        if n > 0:
            table.prototypes[i] = mixed / n
    return table


def total_loss(bce: LossValue, oim_terms: list, lambda_id: float = 1.0) -> LossValue:
    """``bce + lambda_id * mean(oim)`` with gradients combined the same way.

    Gradient bundles are merged by key; OIM gradients are scaled by
    ``lambda_id / len(oim_terms)``.
    """
    if lambda_id < 0:
        raise ValueError("lambda_id must be non-negative")
    grads = {k: np.array(v, dtype=np.float64) for k, v in bce.grads.items()}
    if not oim_terms or lambda_id == 0:
        return LossValue(bce.value, grads)
    scale = lambda_id / len(oim_terms)
    value = bce.value + scale * sum(t.value for t in oim_terms)
    for t in oim_terms:
        for k, g in t.grads.items():
            g = scale * np.asarray(g, dtype=np.float64)
            grads[k] = grads[k] + g if k in grads else g
    return LossValue(float(value), grads)
