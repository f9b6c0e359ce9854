"""End-to-end runs: split, train, score, report. Shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from .data import FeatureDataset, probe_gallery, split_identities
from .evaluation import EvalConfig, clip_pair_scores, ensemble_matrix, metrics_report
from .model import VARIANTS
from .training import TrainConfig, train

log = logging.getLogger(__name__)

ABLATION_ORDER = [v.name for v in sorted(VARIANTS.values(), key=lambda v: v.row)]
SWEEP_RATES = (0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0)

# the desk-scale benchmark: clean and occluded runs differ only in occlusion_prob
BENCH = {
    "data": dict(n_identities=32, n_cameras=2, frames_per_sequence=100, feature_dim=64,
                 camera_offset_scale=0.5, frame_noise_sigma=0.5),
    "train": dict(lr0=0.001, epochs=30),
}


@dataclass
class RunResult:
    report: dict
    params: object
    history: list = field(default_factory=list)
    seconds: float = 0.0


def heldout_sets(dataset: FeatureDataset, train_fraction: float = 0.5):
    train_set, test_set = split_identities(dataset, train_fraction)
    probes, gallery = probe_gallery(test_set)
    return train_set, probes, gallery


def evaluate(params, probes, gallery, eval_cfg: EvalConfig, config_echo=None) -> dict:
    clip_scores = clip_pair_scores(params, probes, gallery, eval_cfg)
    sm = ensemble_matrix(clip_scores, probes, gallery, eval_cfg.ensemble_rate)
    return metrics_report(sm, eval_cfg.ensemble_rate, config_echo, max_rank=min(20, len(gallery)))


def train_and_evaluate(dataset: FeatureDataset, train_cfg: TrainConfig, eval_cfg: EvalConfig,
                       config_echo=None) -> RunResult:
    t0 = time.perf_counter()
    train_set, probes, gallery = heldout_sets(dataset)
    params, history = train(train_set, train_cfg)
    report = evaluate(params, probes, gallery, eval_cfg, config_echo)
    return RunResult(report, params, history, time.perf_counter() - t0)


def ablate(dataset: FeatureDataset, train_cfg: TrainConfig, eval_cfg: EvalConfig,
           variants=None, config_echo=None) -> dict:
    """One metrics report per variant, keyed by variant name."""
    out = {}
    for name in variants or ABLATION_ORDER:
        cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "variant": name})
        res = train_and_evaluate(dataset, cfg, eval_cfg, {**(config_echo or {}), "variant": name})
        log.info("ablate %s top1 %.4f (%.1fs)", name, res.report["top1"], res.seconds)
        out[name] = res.report
    return out


def sweep_ensemble(dataset: FeatureDataset, train_cfg: TrainConfig, eval_cfg: EvalConfig,
                   rates=SWEEP_RATES, config_echo=None) -> dict:
    """Train once, then re-aggregate the same clip-pair scores at every rate."""
    train_set, probes, gallery = heldout_sets(dataset)
    params, _ = train(train_set, train_cfg)
    clip_scores = clip_pair_scores(params, probes, gallery, eval_cfg)
    reports = {}
    for rate in rates:
        sm = ensemble_matrix(clip_scores, probes, gallery, rate)
        reports[rate] = metrics_report(sm, rate, config_echo, max_rank=min(20, len(gallery)))
    return reports
