"""Pairwise similarity feature, fc-3 scoring and metric-learning baselines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .attention import COLLAB_ATTENDED, SELF_ATTENDED, ProjectedClip, SequenceDescriptor
from .errors import ContractError, DimensionError


@dataclass(frozen=True)
class MatchScore:
    logit: float
    probability: float


def gated_difference(x_self, y_self, x_collab, y_collab):
    """``(x_self - y_self) * (x_collab - y_collab)`` on raw arrays (broadcasts)."""
    return (x_self - y_self) * (x_collab - y_collab)


def similarity_feature(x_xx: SequenceDescriptor, y_yy: SequenceDescriptor,
                       x_yx: SequenceDescriptor, y_xy: SequenceDescriptor) -> np.ndarray:
    """Similarity vector of a probe/gallery pair.

    The self-attended difference gates the collaborative difference element
    by element, so the result is a vector, not a scalar.
    """
    for d, role in ((x_xx, SELF_ATTENDED), (y_yy, SELF_ATTENDED),
                    (x_yx, COLLAB_ATTENDED), (y_xy, COLLAB_ATTENDED)):
        if d.role != role:
            raise ContractError(f"expected a {role} descriptor, got {d.role}")
    shapes = {np.shape(d.vec) for d in (x_xx, y_yy, x_yx, y_xy)}
    if len(shapes) != 1:
        raise DimensionError(f"descriptor lengths differ: {sorted(shapes)}")
    return gated_difference(x_xx.vec, y_yy.vec, x_yx.vec, y_xy.vec)


def match_score(s: np.ndarray, fc3: nk.LinearLayer) -> MatchScore:
    if fc3.out_dim != 1:
        raise DimensionError(f"fc-3 must map to a single logit, maps to {fc3.out_dim}")
    logit = float(nk.linear_forward(np.asarray(s)[None, :], fc3)[0, 0])
    return MatchScore(logit, float(nk.sigmoid(logit)))


def pool_baseline(clip: ProjectedClip, mode: str = "avg") -> SequenceDescriptor:
    """Temporal average/max pooling of the fc-0 features (ablation baselines)."""
    if mode == "avg":
        vec = nk.column_mean(clip.f_feat)
    elif mode == "max":
        vec = nk.column_max(clip.f_feat)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return SequenceDescriptor(vec, SELF_ATTENDED)


# ---------------------------------------------------------------------------
# generalized linear similarity


@dataclass
class GeneralizedLinearParams:
    """Factor matrices of the generalized linear similarity.

    ``A = A_half.T @ A_half``, ``B = B_half.T @ B_half``,
    ``C = Cx_half.T @ Cy_half`` and ``D = Dy_half.T @ Dx_half``.
    """

    A_half: np.ndarray
    B_half: np.ndarray
    Cx_half: np.ndarray
    Cy_half: np.ndarray
    Dx_half: np.ndarray
    Dy_half: np.ndarray

    def __post_init__(self):
        mats = [np.asarray(m, dtype=np.float64) for m in
                (self.A_half, self.B_half, self.Cx_half, self.Cy_half, self.Dx_half, self.Dy_half)]
        (self.A_half, self.B_half, self.Cx_half, self.Cy_half, self.Dx_half, self.Dy_half) = mats
        if any(m.ndim != 2 for m in mats):
            raise DimensionError("factor matrices must be 2-D")
        n = {m.shape[1] for m in mats}
        if len(n) != 1:
            raise DimensionError(f"factor matrices act on different dimensions: {sorted(n)}")
        if self.Cx_half.shape[0] != self.Cy_half.shape[0] or self.Dx_half.shape[0] != self.Dy_half.shape[0]:
            raise DimensionError("paired factors must share their row count")

    @property
    def A(self):
        return self.A_half.T @ self.A_half

    @property
    def B(self):
        return self.B_half.T @ self.B_half

    @property
    def C(self):
        return self.Cx_half.T @ self.Cy_half

    @property
    def D(self):
        return self.Dy_half.T @ self.Dx_half

    @classmethod
    def mahalanobis_setting(cls, M: np.ndarray) -> "GeneralizedLinearParams":
        """Factors giving A = B = C = M and D = M.T for a PSD matrix ``M``."""
        M = np.asarray(M, dtype=np.float64)
        vals, vecs = np.linalg.eigh((M + M.T) / 2)
        L = np.sqrt(np.clip(vals, 0.0, None))[:, None] * vecs.T
        return cls(L, L, L, L, L, L)


def generalized_similarity(x: np.ndarray, y: np.ndarray, p: GeneralizedLinearParams) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = p.A_half.shape[1]
    if x.shape != (n,) or y.shape != (n,):
        raise DimensionError(f"vectors must have length {n}")
    ax, by = p.A_half @ x, p.B_half @ y
    part_a = ax @ ax - (p.Dy_half @ y) @ (p.Dx_half @ x)
    part_b = by @ by - (p.Cx_half @ x) @ (p.Cy_half @ y)
    return float(part_a + part_b)


def mahalanobis(x: np.ndarray, y: np.ndarray, M: np.ndarray) -> float:
    """Squared Mahalanobis form ``(x - y).T @ M @ (x - y)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or x.shape != (M.shape[0],) or y.shape != x.shape:
        raise DimensionError(f"incompatible shapes x{x.shape} y{y.shape} M{M.shape}")
    d = x - y
    return float(d @ M @ d)
