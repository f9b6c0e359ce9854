"""Self and collaborative temporal attention.

Both subnetworks share one parameter-free correlation function: the query is
multiplied into every frame (Hadamard, per feature dimension) or dotted with
it (one scalar per frame), and the result is softmax-normalised over time.
The weights then combine the fc-0 frame features column by column.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import numkit as nk
from .errors import ContractError, DimensionError

Mode = Literal["hadamard", "dot"]
MODES = ("hadamard", "dot")

POOLED_SELF = "pooled_self"
SELF_ATTENDED = "self_attended"
COLLAB_ATTENDED = "collab_attended"


@dataclass
class ProjectedClip:
    """The three 128-wide projections of one clip (fc-0, fc-1, fc-2)."""

    f_feat: np.ndarray
    s_feat: np.ndarray
    c_feat: np.ndarray

    def __post_init__(self):
        shapes = {self.f_feat.shape, self.s_feat.shape, self.c_feat.shape}
        if len(shapes) != 1:
            raise DimensionError(f"projections disagree in shape: {sorted(shapes)}")
        if self.f_feat.shape[-2] < 1:
            raise DimensionError("a clip needs at least one frame")


@dataclass
class SequenceDescriptor:
    vec: np.ndarray
    role: str


@dataclass
class AttendRecord:
    """Forward state kept for :func:`attend_backward`."""

    kind: str
    mode: str
    temperature: float
    keys: np.ndarray  # s_feat (SAN) or c_feat (CAN)
    values: np.ndarray  # f_feat
    query: np.ndarray
    weights: np.ndarray
    fingerprint: str = field(repr=False, default="")


def _fingerprint(*arrays) -> str:
    h = hashlib.blake2b(digest_size=16)
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def correlation_logits(keys: np.ndarray, query: np.ndarray, mode: str = "hadamard",
                       temperature: float = 1.0) -> np.ndarray:
    query = np.asarray(query, dtype=np.float64)
    if keys.shape[-1] != query.shape[-1]:
        raise DimensionError(f"frames have {keys.shape[-1]} columns, query has {query.shape[-1]}")
    q = query[..., None, :]
    if mode == "hadamard":
        logits = keys * q
    elif mode == "dot":
        per_frame = (keys * q).sum(axis=-1, keepdims=True)
        logits = np.broadcast_to(per_frame, per_frame.shape[:-1] + keys.shape[-1:])
    else:
        raise ValueError(f"unknown correlation mode {mode!r}")
    if temperature != 1.0:
        logits = logits / temperature
    return logits


def correlation_backward(keys, query, grad_logits, mode="hadamard", temperature=1.0):
    """Gradients of the correlation logits w.r.t. ``(keys, query)``."""
    query = np.asarray(query, dtype=np.float64)
    g = grad_logits / temperature if temperature != 1.0 else grad_logits
    q = query[..., None, :]
    if mode == "hadamard":
        gk = g * q
        gq = (g * keys).sum(axis=-2)
    else:
        gt = g.sum(axis=-1, keepdims=True)
        gk = gt * q
        gq = (gt * keys).sum(axis=-2)
    return nk.sum_to_shape(gk, keys.shape), nk.sum_to_shape(gq, query.shape)


def correlate(frames: np.ndarray, query: np.ndarray, mode: str = "hadamard",
              temperature: float = 1.0) -> np.ndarray:
    """Normalised attention weights, one column of temporal weights per feature."""
    frames = np.asarray(frames, dtype=np.float64)
    return nk.softmax_temporal(correlation_logits(frames, query, mode, temperature))


def attend(keys, values, query, mode="hadamard", temperature=1.0):
    """Record-free forward used on the training and scoring hot paths."""
    w = correlate(keys, query, mode, temperature)
    return nk.weighted_sum(w, values), w


def attend_grads(keys, values, query, weights, grad_desc, mode="hadamard", temperature=1.0):
    """Core backward of :func:`attend`: gradients for (values, keys, query)."""
    g_w, g_f = nk.weighted_sum_backward(weights, values, grad_desc)
    g_logits = nk.softmax_temporal_backward(weights, nk.sum_to_shape(g_w, weights.shape))
    g_k, g_q = correlation_backward(keys, query, g_logits, mode, temperature)
    return g_f, g_k, g_q


def _attend(kind, keys, values, query, mode, temperature):
    desc, w = attend(keys, values, query, mode, temperature)
    rec = AttendRecord(kind, mode, temperature, keys, values, np.asarray(query, dtype=np.float64), w)
    rec.fingerprint = _fingerprint(keys, values, rec.query)
    return desc, rec


def self_attend(clip: ProjectedClip, mode: str = "hadamard", temperature: float = 1.0):
    """SAN: weight the clip's own frames by their correlation with its mean.

    Returns ``(descriptor, weights, record)``.
    """
    query = nk.column_mean(clip.s_feat)
    desc, rec = _attend("self", clip.s_feat, clip.f_feat, query, mode, temperature)
    return SequenceDescriptor(desc, SELF_ATTENDED), rec.weights, rec


def collab_attend(clip: ProjectedClip, partner: SequenceDescriptor, mode: str = "hadamard",
                  temperature: float = 1.0):
    """CAN: weight this clip's frames using the partner's self-attended descriptor."""
    if partner.role != SELF_ATTENDED:
        raise ContractError(f"collaborative attention needs a {SELF_ATTENDED} partner, got {partner.role}")
    desc, rec = _attend("collab", clip.c_feat, clip.f_feat, partner.vec, mode, temperature)
    return SequenceDescriptor(desc, COLLAB_ATTENDED), rec.weights, rec


def attend_backward(rec: AttendRecord, grad_desc: np.ndarray):
    """Return ``(grad_f, grad_keys, grad_query)`` for one attention call.

    For SAN the pooled-query path is already folded into ``grad_keys`` and
    ``grad_query`` is returned for inspection only. For CAN, ``grad_query`` is
    the gradient owed to the partner descriptor.
    """
    if _fingerprint(rec.keys, rec.values, rec.query) != rec.fingerprint:
        raise ContractError("attention record is stale: its inputs changed after the forward pass")
    grad_desc = np.asarray(grad_desc, dtype=np.float64)
    g_f, g_k, g_q = attend_grads(rec.keys, rec.values, rec.query, rec.weights, grad_desc,
                                 rec.mode, rec.temperature)
    if rec.kind == "self":
        g_k = g_k + nk.column_mean_backward(rec.keys.shape, g_q)
    return g_f, g_k, g_q
