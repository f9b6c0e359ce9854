"""The matching head: projections, attention wiring per variant, fc-3 logit.

Each variant is a small recipe of descriptor nodes. A node is one of

* ``mean`` / ``max`` - temporal pooling of the fc-0 features,
* ``san`` - self attention (query = mean of the fc-1 features),
* ``can`` - collaborative attention on the fc-2 features, queried by another
  node of the partner clip,

and the similarity vector is ``(n[a] - n[b]) * (n[c] - n[d])`` for four slot
indices. The full model uses ``san(x), san(y), can(x | san(y)), can(y | san(x))``.
Gradients are derived by hand, node by node, in reverse order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention as att
from . import numkit as nk
from .errors import ContractError, DimensionError
from .losses import OimTable, bce_with_logit, oim_forward

# (node list, similarity slots); node = (kind, side, query_node_index or None)
_FULL = ([("san", "x", None), ("san", "y", None), ("can", "x", 1), ("can", "y", 0)], (0, 1, 2, 3))

WIRINGS = {
    "pool": ([("pool", "x", None), ("pool", "y", None)], (0, 1, 0, 1)),
    "san": ([("san", "x", None), ("san", "y", None)], (0, 1, 0, 1)),
    "can": ([("mean", "x", None), ("mean", "y", None), ("can", "x", 1), ("can", "y", 0)], (2, 3, 2, 3)),
    "single": ([("san", "x", None), ("mean", "y", None), ("mean", "x", None), ("can", "y", 0)], (0, 1, 2, 3)),
    "full": _FULL,
}


@dataclass(frozen=True)
class Variant:
    """One row of the temporal-modelling ablation."""

    name: str
    row: int
    wiring: str
    pooling: str = "avg"
    shared_fc: bool = False
    mode: str = "hadamard"


VARIANTS = {
    v.name: v for v in (
        Variant("avg-pool", 1, "pool", pooling="avg"),
        Variant("max-pool", 2, "pool", pooling="max"),
        Variant("san-only", 3, "san"),
        Variant("can-only", 4, "can"),
        Variant("single-path", 5, "single"),
        Variant("shared-fc", 6, "full", shared_fc=True),
        Variant("dot-product", 7, "full", mode="dot"),
        Variant("full", 8, "full"),
    )
}


def get_variant(name) -> Variant:
    if isinstance(name, Variant):
        return name
    if isinstance(name, int) or (isinstance(name, str) and name.isdigit()):
        for v in VARIANTS.values():
            if v.row == int(name):
                return v
    if name not in VARIANTS:
        raise ContractError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
    return VARIANTS[name]


@dataclass
class ModelParams:
    fc0: nk.LinearLayer
    fc1: nk.LinearLayer
    fc2: nk.LinearLayer
    fc3: nk.LinearLayer
    variant: str = "full"
    temperature: float = 1.0

    def __post_init__(self):
        v = get_variant(self.variant)
        self.variant = v.name
        if v.shared_fc:
            self.fc2 = self.fc1
        d, D = self.fc0.in_dim, self.fc0.out_dim
        for name in ("fc1", "fc2"):
            layer = getattr(self, name)
            if (layer.in_dim, layer.out_dim) != (d, D):
                raise DimensionError(f"{name} must map {d} -> {D}")
        if (self.fc3.in_dim, self.fc3.out_dim) != (D, 1):
            raise DimensionError(f"fc3 must map {D} -> 1")

    @property
    def spec(self) -> Variant:
        return get_variant(self.variant)

    @property
    def in_dim(self) -> int:
        return self.fc0.in_dim

    @property
    def proj_dim(self) -> int:
        return self.fc0.out_dim

    @classmethod
    def init(cls, in_dim: int, proj_dim: int = 128, variant="full",
             rng: np.random.Generator | None = None, temperature: float = 1.0) -> "ModelParams":
        rng = np.random.default_rng(0) if rng is None else rng
        layers = [nk.LinearLayer.init_uniform(in_dim, proj_dim, rng) for _ in range(3)]
        fc3 = nk.LinearLayer.init_uniform(proj_dim, 1, rng)
        return cls(*layers, fc3, variant=variant, temperature=temperature)

    def layers(self) -> dict:
        """Distinct layers by name (fc2 is omitted when it aliases fc1)."""
        out = {"fc0": self.fc0, "fc1": self.fc1, "fc2": self.fc2, "fc3": self.fc3}
        if self.spec.shared_fc:
            del out["fc2"]
        return out

    def trainable(self) -> dict:
        """Parameter arrays updated by SGD, keyed ``"<layer>.weight"`` / ``"<layer>.bias"``.

        The fc-2 bias is left out when fc-2 is its own layer: a per-column
        constant added to the collaborative keys shifts every temporal logit
        of that column equally, so the softmax (and the loss) ignores it.
        """
        out = {}
        for name, layer in self.layers().items():
            out[f"{name}.weight"] = layer.weight
            if not (name == "fc2" and not self.spec.shared_fc):
                out[f"{name}.bias"] = layer.bias
        return out

    def copy(self) -> "ModelParams":
        fc1 = self.fc1.copy()
        fc2 = fc1 if self.spec.shared_fc else self.fc2.copy()
        return ModelParams(self.fc0.copy(), fc1, fc2, self.fc3.copy(), self.variant, self.temperature)


# ---------------------------------------------------------------------------
# forward


@dataclass
class Projected:
    raw: np.ndarray
    f: np.ndarray
    s: np.ndarray
    c: np.ndarray

    def expand(self, axis: int) -> "Projected":
        return Projected(*(np.expand_dims(a, axis) for a in (self.raw, self.f, self.s, self.c)))


def project(params: ModelParams, X: np.ndarray) -> Projected:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 2 or X.shape[-2] < 1:
        raise DimensionError("clips must be (..., T, d) with T >= 1")
    f = nk.linear_forward(X, params.fc0)
    s = nk.linear_forward(X, params.fc1)
    c = s if params.spec.shared_fc else nk.linear_forward(X, params.fc2)
    return Projected(X, f, s, c)


_POOL_KIND = {"avg": "mean", "max": "max"}


def _recipe(params: ModelParams):
    v = params.spec
    nodes, slots = WIRINGS[v.wiring]
    if v.wiring == "pool":
        nodes = [(_POOL_KIND[v.pooling] if k == "pool" else k, side, q) for k, side, q in nodes]
    return nodes, slots


@dataclass
class PairCache:
    px: Projected
    py: Projected
    nodes: list
    slots: tuple
    values: list = field(default_factory=list)
    aux: list = field(default_factory=list)  # per node: (keys, values, query, weights) or None
    s: np.ndarray | None = None
    logit: np.ndarray | None = None


def _node_forward(kind, proj: Projected, query, params: ModelParams):
    mode, temp = params.spec.mode, params.temperature
    if kind == "mean":
        return nk.column_mean(proj.f), None
    if kind == "max":
        return nk.column_max(proj.f), None
    if kind == "san":
        q = nk.column_mean(proj.s)
        desc, w = att.attend(proj.s, proj.f, q, mode, temp)
        return desc, (proj.s, proj.f, q, w)
    if kind == "can":
        desc, w = att.attend(proj.c, proj.f, query, mode, temp)
        return desc, (proj.c, proj.f, query, w)
    raise ValueError(kind)


def pair_forward(params: ModelParams, px: Projected, py: Projected) -> PairCache:
    """Logits for probe/gallery clips; leading axes of the two sides broadcast."""
    nodes, slots = _recipe(params)
    cache = PairCache(px, py, nodes, slots)
    for kind, side, qi in nodes:
        proj = px if side == "x" else py
        query = cache.values[qi] if qi is not None else None
        val, aux = _node_forward(kind, proj, query, params)
        cache.values.append(val)
        cache.aux.append(aux)
    a, b, c, d = (cache.values[i] for i in slots)
    cache.s = (a - b) * (c - d)
    cache.logit = (cache.s @ params.fc3.weight)[..., 0] + params.fc3.bias[0]
    return cache


def self_forward(params: ModelParams, px: Projected):
    """The per-clip identity descriptor the OIM branch attaches to."""
    kind = _self_kind(params)
    val, aux = _node_forward(kind, px, None, params)
    return val, (kind, aux)


def _self_kind(params: ModelParams) -> str:
    v = params.spec
    if v.wiring in ("full", "san", "single"):
        return "san"
    if v.wiring == "pool":
        return _POOL_KIND[v.pooling]
    return "mean"


def pair_logits(params: ModelParams, X, Y) -> np.ndarray:
    return pair_forward(params, project(params, X), project(params, Y)).logit


# ---------------------------------------------------------------------------
# backward


def _zero_grads(params: ModelParams) -> dict:
    return {k: np.zeros_like(v) for k, v in params.trainable().items()}


class _ProjGrad:
    def __init__(self, proj: Projected):
        self.f = np.zeros(proj.f.shape)
        self.s = np.zeros(proj.s.shape)
        self.c = np.zeros(proj.c.shape)


def _node_backward(kind, aux, proj: Projected, pg: _ProjGrad, g, params: ModelParams):
    """Accumulate a node's gradient into ``pg``; returns the query gradient (CAN only)."""
    mode, temp = params.spec.mode, params.temperature
    if kind == "mean":
        pg.f += nk.column_mean_backward(proj.f.shape, g)
        return None
    if kind == "max":
        pg.f += nk.column_max_backward(proj.f, g)
        return None
    keys, values, query, w = aux
    g_f, g_k, g_q = att.attend_grads(keys, values, query, w, g, mode, temp)
    pg.f += nk.sum_to_shape(g_f, proj.f.shape)
    if kind == "san":
        g_k = g_k + nk.column_mean_backward(keys.shape, g_q)
        pg.s += nk.sum_to_shape(g_k, proj.s.shape)
        return None
    pg.c += nk.sum_to_shape(g_k, proj.c.shape)
    return g_q


def _proj_backward(params: ModelParams, proj: Projected, pg: _ProjGrad, grads: dict):
    _, gw, gb = nk.linear_backward(proj.raw, params.fc0, pg.f)
    grads["fc0.weight"] += gw
    grads["fc0.bias"] += gb
    if params.spec.shared_fc:
        _, gw, gb = nk.linear_backward(proj.raw, params.fc1, pg.s + pg.c)
        grads["fc1.weight"] += gw
        grads["fc1.bias"] += gb
        return
    _, gw, gb = nk.linear_backward(proj.raw, params.fc1, pg.s)
    grads["fc1.weight"] += gw
    grads["fc1.bias"] += gb
    _, gw, _ = nk.linear_backward(proj.raw, params.fc2, pg.c)
    grads["fc2.weight"] += gw


def _backprop_nodes(params: ModelParams, cache: PairCache, grad_logit: np.ndarray):
    """Push ``grad_logit`` back to the projected features of both sides."""
    g_s = np.asarray(grad_logit, dtype=np.float64)[..., None] * params.fc3.weight[:, 0]
    a, b, c, d = cache.slots
    v = cache.values
    d1 = v[a] - v[b]
    d2 = v[c] - v[d]
    g_nodes = [np.zeros(np.shape(val)) for val in v]
    g_nodes[a] = g_nodes[a] + g_s * d2
    g_nodes[b] = g_nodes[b] - g_s * d2
    g_nodes[c] = g_nodes[c] + g_s * d1
    g_nodes[d] = g_nodes[d] - g_s * d1

    pgx, pgy = _ProjGrad(cache.px), _ProjGrad(cache.py)
    for i in reversed(range(len(cache.nodes))):
        kind, side, qi = cache.nodes[i]
        proj, pg = (cache.px, pgx) if side == "x" else (cache.py, pgy)
        g = nk.sum_to_shape(g_nodes[i], np.shape(v[i]))
        g_q = _node_backward(kind, cache.aux[i], proj, pg, g, params)
        if g_q is not None:
            g_nodes[qi] = g_nodes[qi] + g_q
    return pgx, pgy


def pair_backward(params: ModelParams, cache: PairCache, grad_logit: np.ndarray,
                  grads: dict | None = None) -> dict:
    """Accumulate parameter gradients of ``sum(grad_logit * logit)`` into ``grads``."""
    grads = _zero_grads(params) if grads is None else grads
    grad_logit = np.asarray(grad_logit, dtype=np.float64)
    s = cache.s
    grads["fc3.weight"] += s.reshape(-1, s.shape[-1]).T @ grad_logit.reshape(-1, 1)
    grads["fc3.bias"] += np.array([grad_logit.sum()])
    pgx, pgy = _backprop_nodes(params, cache, grad_logit)
    _proj_backward(params, cache.px, pgx, grads)
    _proj_backward(params, cache.py, pgy, grads)
    return grads


def self_backward(params: ModelParams, px: Projected, record, grad_desc, grads: dict) -> dict:
    kind, aux = record
    pg = _ProjGrad(px)
    _node_backward(kind, aux, px, pg, np.asarray(grad_desc, dtype=np.float64), params)
    _proj_backward(params, px, pg, grads)
    return grads


# ---------------------------------------------------------------------------
# losses over a batch


@dataclass
class BatchLoss:
    value: float
    bce: float
    oim: float
    accuracy: float
    grads: dict


def batch_loss(params: ModelParams, pair_groups, clip_groups, table: OimTable | None,
               lambda_id: float = 1.0, *, want_grads: bool = True) -> BatchLoss:
    """Mean BCE over pairs plus ``lambda_id`` times mean OIM over clips.

    ``pair_groups`` is a list of ``(X, Y, labels)`` stacks (equal clip lengths
    within a stack); ``clip_groups`` a list of ``(X, identity_indices)`` for
    the identity branch. Self descriptors that feed OIM are also returned via
    ``BatchLoss.grads['_oim_features']`` so the caller can update the table.
    """
    n_pairs = sum(len(lbl) for _, _, lbl in pair_groups)
    n_clips = sum(len(ids) for _, ids in clip_groups)
    if n_pairs == 0:
        raise ContractError("batch has no pairs")
    grads = _zero_grads(params) if want_grads else None
    bce_sum, correct = 0.0, 0
    for X, Y, labels in pair_groups:
        labels = np.asarray(labels, dtype=np.float64)
        px, py = project(params, X), project(params, Y)
        cache = pair_forward(params, px, py)
        loss = bce_with_logit(cache.logit, labels)
        bce_sum += loss.value
        correct += int(((cache.logit > 0) == (labels > 0.5)).sum())
        if want_grads:
            pair_backward(params, cache, loss.grads["logit"] / n_pairs, grads)

    oim_sum = 0.0
    feats, feat_ids = [], []
    use_oim = table is not None and lambda_id > 0 and n_clips > 0
    if use_oim:
        for X, ids in clip_groups:
            px = project(params, X)
            desc, rec = self_forward(params, px)
            loss = oim_forward(desc, ids, table)
            oim_sum += loss.value
            feats.append(desc)
            feat_ids.append(np.asarray(ids))
            if want_grads:
                self_backward(params, px, rec, loss.grads["feature"] * (lambda_id / n_clips), grads)
    bce = bce_sum / n_pairs
    oim = oim_sum / n_clips if use_oim else 0.0
    value = bce + (lambda_id * oim if use_oim else 0.0)
    out = BatchLoss(value, bce, oim, correct / n_pairs, grads if grads is not None else {})
    if use_oim:
        out.grads["_oim_features"] = (np.concatenate(feats), np.concatenate(feat_ids))
    return out


# registered for numkit.grad_check: the full pair graph w.r.t. the probe clip
@nk.register_op("scan_pair")
def _scan_pair_op(x, rng):
    T, d = x.shape[-2:]
    params = ModelParams.init(d, 6, "full", rng)
    Y = rng.standard_normal((T + 1, d))

    def fun(v):
        return bce_with_logit(pair_logits(params, v, Y), 1.0).value

    def grad(v):
        px, py = project(params, v), project(params, Y)
        cache = pair_forward(params, px, py)
        g_logit = bce_with_logit(cache.logit, 1.0).grads["logit"]
        return _input_grad(params, cache, g_logit)

    return fun, grad


def _input_grad(params, cache, g_logit):
    """Gradient w.r.t. the probe's raw features (used by grad checks only)."""
    pgx, _ = _backprop_nodes(params, cache, g_logit)
    W2 = params.fc1.weight if params.spec.shared_fc else params.fc2.weight
    return pgx.f @ params.fc0.weight.T + pgx.s @ params.fc1.weight.T + pgx.c @ W2.T


def full_graph_check(variant="full", seed: int = 0, *, in_dim: int = 8, proj_dim: int = 6,
                     h: float = 1e-5, tol: float = 1e-4, lambda_id: float = 1.0) -> nk.GradReport:
    """Finite-difference check of every trainable tensor through the whole loss.

    A small random batch (three pairs with unequal probe/gallery lengths, four
    identity clips) exercises projections, both attention stages, the
    similarity feature, fc3 + BCE and the OIM branch.
    """
    rng = np.random.default_rng(seed)
    params = ModelParams.init(in_dim, proj_dim, variant, rng)
    X = rng.standard_normal((3, 5, in_dim))
    Y = rng.standard_normal((3, 4, in_dim))
    labels = np.array([1.0, 0.0, 1.0])
    C = rng.standard_normal((4, 5, in_dim))
    ids = np.array([0, 1, 2, 0])
    table = OimTable.random(3, proj_dim, rng)
    pairs, clips = [(X, Y, labels)], [(C, ids)]

    def fun():
        return batch_loss(params, pairs, clips, table, lambda_id, want_grads=False).value

    grads = batch_loss(params, pairs, clips, table, lambda_id).grads
    arrays = params.trainable()
    return nk.check_gradients(fun, arrays, {k: grads[k] for k in arrays}, h=h, tol=tol,
                              op_name=f"full_graph[{get_variant(variant).name}]")
