"""Sequence-pair scoring by clip ensembles, and CMC / mAP ranking metrics."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import numkit as nk
from .data import SequenceRecord, sequence_clips
from .errors import ContractError, DimensionError
from .model import ModelParams, Projected, pair_forward, project

# cap on the probe-clip x gallery-clip x T x D working set per scoring call
_GRID_BUDGET = 2_000_000


@dataclass
class EvalConfig:
    ensemble_rate: float = 0.10
    clip_len: int = 10
    stride: int = 5

    def __post_init__(self):
        if not 0.0 < self.ensemble_rate <= 1.0:
            raise ValueError("ensemble_rate must lie in (0, 1]")
        if self.clip_len < 1 or self.stride < 1:
            raise ValueError("clip_len and stride must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ScoreMatrix:
    scores: np.ndarray  # (n_probe, n_gallery), higher = more similar
    probe_ids: np.ndarray
    gallery_ids: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.probe_ids = np.asarray(self.probe_ids)
        self.gallery_ids = np.asarray(self.gallery_ids)
        if self.scores.shape != (len(self.probe_ids), len(self.gallery_ids)):
            raise DimensionError(
                f"scores {self.scores.shape} vs {len(self.probe_ids)} probes x {len(self.gallery_ids)} gallery")
        if not np.all(np.isfinite(self.scores)):
            raise ContractError("score matrix contains non-finite entries")


def ensemble_score(clip_scores, rate: float = 0.10) -> float:
    """Mean of the top ``max(1, ceil(rate * n))`` clip-pair scores."""
    s = np.asarray(clip_scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ContractError("no clip-pair scores to ensemble")
    if not 0.0 < rate <= 1.0:
        raise ValueError("rate must lie in (0, 1]")
    k = max(1, math.ceil(rate * s.size))
    if k == s.size:
        return float(s.mean())
    return float(np.partition(s, s.size - k)[s.size - k:].mean())


# ---------------------------------------------------------------------------
# clip-pair scoring


class _SeqClips:
    """Projected clips of one sequence, grouped by clip length."""

    def __init__(self, params: ModelParams, rec: SequenceRecord, cfg: EvalConfig):
        groups = sequence_clips(rec.features, cfg.clip_len, cfg.stride)
        self.groups = {L: project(params, X.astype(np.float64)) for L, X in groups.items()}
        self.count = sum(p.raw.shape[0] for p in self.groups.values())


def _concat(projs):
    return Projected(*(np.concatenate([getattr(p, k) for p in projs]) for k in ("raw", "f", "s", "c")))


def clip_pair_scores(params: ModelParams, probes, gallery, cfg: EvalConfig | None = None):
    """Probabilities for every probe-clip x gallery-clip pair of every sequence pair.

    Returns a nested list ``out[i][j]`` of 1-D arrays (probe ``i``, gallery ``j``).
    """
    cfg = cfg or EvalConfig()
    pclips = [_SeqClips(params, r, cfg) for r in probes]
    gclips = [_SeqClips(params, r, cfg) for r in gallery]
    D = params.proj_dim

    # gallery clips stacked per length, remembering the owning sequence
    g_stack = {}
    for j, sc in enumerate(gclips):
        for L, proj in sc.groups.items():
            g_stack.setdefault(L, ([], []))
            g_stack[L][0].append(proj)
            g_stack[L][1].append(np.full(proj.raw.shape[0], j))
    g_stack = {L: (_concat(ps), np.concatenate(owners)) for L, (ps, owners) in g_stack.items()}

    out = [[[] for _ in gallery] for _ in probes]
    for i, sc in enumerate(pclips):
        for Lp, pproj in sc.groups.items():
            n_p = pproj.raw.shape[0]
            px = pproj.expand(1)
            for Lg, (gproj, owners) in g_stack.items():
                n_g = gproj.raw.shape[0]
                step = max(1, _GRID_BUDGET // max(1, n_p * max(Lp, Lg) * D))
                probs = np.empty((n_p, n_g))
                for a in range(0, n_g, step):
                    gy = Projected(*(getattr(gproj, k)[a:a + step] for k in ("raw", "f", "s", "c"))).expand(0)
                    probs[:, a:a + step] = nk.sigmoid(pair_forward(params, px, gy).logit)
                for j in range(len(gallery)):
                    cols = owners == j
                    if cols.any():
                        out[i][j].append(probs[:, cols].ravel())
    return [[np.concatenate(cell) for cell in row] for row in out]


def ensemble_matrix(clip_scores, probes, gallery, rate: float) -> ScoreMatrix:
    scores = np.array([[ensemble_score(cell, rate) for cell in row] for row in clip_scores])
    return ScoreMatrix(scores.reshape(len(probes), len(gallery)),
                       [r.identity for r in probes], [r.identity for r in gallery])


def score_matrix(params: ModelParams, probes, gallery, cfg: EvalConfig | None = None) -> ScoreMatrix:
    cfg = cfg or EvalConfig()
    return ensemble_matrix(clip_pair_scores(params, probes, gallery, cfg), probes, gallery, cfg.ensemble_rate)


def sequence_score(probe: SequenceRecord, gallery: SequenceRecord, params: ModelParams,
                   cfg: EvalConfig | None = None) -> float:
    cfg = cfg or EvalConfig()
    return ensemble_score(clip_pair_scores(params, [probe], [gallery], cfg)[0][0], cfg.ensemble_rate)


# ---------------------------------------------------------------------------
# ranking metrics


def _ranked(sm: ScoreMatrix, i: int) -> np.ndarray:
    """Gallery order for probe ``i``: score descending, ties by gallery index."""
    return np.argsort(-sm.scores[i], kind="stable")


def match_ranks(sm: ScoreMatrix) -> np.ndarray:
    """0-based rank of the first correct gallery entry per probe (-1 if none)."""
    ranks = np.full(len(sm.probe_ids), -1)
    for i, pid in enumerate(sm.probe_ids):
        hits = np.flatnonzero(sm.gallery_ids[_ranked(sm, i)] == pid)
        if hits.size:
            ranks[i] = hits[0]
    return ranks


def cmc(sm: ScoreMatrix, max_rank: int = 20) -> np.ndarray:
    """Cumulative matching characteristic; ``curve[r]`` = P(first match at rank <= r+1)."""
    ranks = match_ranks(sm)
    valid = ranks >= 0
    if not valid.all():
        warnings.warn(f"{int((~valid).sum())} probe(s) have no gallery match and are excluded",
                      RuntimeWarning, stacklevel=2)
    if not valid.any():
        raise ContractError("no probe has a matching gallery entry")
    ranks = ranks[valid]
    return np.array([(ranks <= r).mean() for r in range(max_rank)])


def average_precision(relevance) -> float:
    """AP of a ranked 0/1 relevance list: mean precision at each relevant position."""
    r = np.asarray(relevance, dtype=np.float64).ravel()
    total = r.sum()
    if total <= 0:
        raise ContractError("average precision is undefined without a relevant item")
    precision = np.cumsum(r) / np.arange(1, r.size + 1)
    return float((r * precision).sum() / total)


def mean_average_precision(sm: ScoreMatrix, skip_unmatched: bool = False) -> float:
    aps = []
    for i, pid in enumerate(sm.probe_ids):
        rel = sm.gallery_ids[_ranked(sm, i)] == pid
        if skip_unmatched and not rel.any():
            continue
        aps.append(average_precision(rel))
    if not aps:
        raise ContractError("no probe has a matching gallery entry")
    return float(np.mean(aps))


def metrics_report(sm: ScoreMatrix, ensemble_rate: float, config: dict | None = None,
                   max_rank: int = 20) -> dict:
    curve = cmc(sm, max_rank)
    return {
        "top1": float(curve[0]),
        "top5": float(curve[min(4, max_rank - 1)]),
        "top10": float(curve[min(9, max_rank - 1)]),
        "top20": float(curve[min(19, max_rank - 1)]),
        "mAP": mean_average_precision(sm, skip_unmatched=True),
        "cmc_curve": [float(v) for v in curve],
        "ensemble_rate": ensemble_rate,
        "config": config or {},
    }
