"""SGD with momentum, the staircase learning-rate schedule, and the training loop."""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numkit as nk
from .data import FeatureDataset, atomic_write, clip_features, dataset_clips, pair_batch, sample_batch
from .errors import (BadMagicError, ChecksumError, TrainingError, TruncatedError, VersionError)
from .losses import OimTable, oim_update
from .model import ModelParams, batch_loss, get_variant

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0001
    epochs: int = 30
    lambda_id: float = 1.0
    batches_per_epoch: int | None = None
    seed: int = 0
    variant: str = "full"
    proj_dim: int = 128
    clip_len: int = 10
    stride: int = 5
    ids_per_batch: int = 16
    clips_per_id: int = 2
    lr_decay: float = 0.001
    lr_step: int = 10
    temperature: float = 1.0
    oim_temperature: float = 0.1
    oim_momentum: float = 0.5

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lambda_id < 0 or self.weight_decay < 0:
            raise ValueError("lambda_id and weight_decay must be non-negative")
        self.variant = get_variant(self.variant).name

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """``lr0 * decay ** (epoch // step)``: a staircase dropping every ``lr_step`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.lr_step)


@dataclass
class SgdState:
    velocity: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "SgdState":
        return cls({k: np.zeros_like(v) for k, v in params.trainable().items()})


def sgd_step(params: ModelParams, grads: dict, state: SgdState, lr: float, cfg: TrainConfig) -> None:
    """In-place momentum SGD; weight decay applies to weights, not biases."""
    arrays = params.trainable()
    for name, g in grads.items():
        if name.startswith("_") or name not in arrays:
            continue
        if not np.all(np.isfinite(g)):
            bad = int((~np.isfinite(g)).sum())
            raise TrainingError(f"non-finite gradient in {name}: {bad} of {g.size} entries")
    for name, p in arrays.items():
        g = grads[name]
        if cfg.weight_decay and name.endswith(".weight"):
            g = g + cfg.weight_decay * p
        v = state.velocity.setdefault(name, np.zeros_like(p))
        v *= cfg.momentum
        v += g
        p -= lr * v


@dataclass
class EpochStats:
    epoch: int
    lr: float
    bce: float
    oim: float
    accuracy: float


def _group_pairs(dataset, pairs):
    groups = defaultdict(lambda: ([], [], []))
    for p in pairs:
        key = (p.probe.length, p.gallery.length)
        xs, ys, ls = groups[key]
        xs.append(clip_features(dataset, p.probe))
        ys.append(clip_features(dataset, p.gallery))
        ls.append(p.label)
    return [(np.stack(x).astype(np.float64), np.stack(y).astype(np.float64), np.array(l))
            for x, y, l in groups.values()]


def _group_clips(dataset, clips, id_index):
    groups = defaultdict(lambda: ([], []))
    for c in clips:
        xs, ids = groups[c.length]
        xs.append(clip_features(dataset, c))
        ids.append(id_index[c.identity])
    return [(np.stack(x).astype(np.float64), np.array(i)) for x, i in groups.values()]


def init_model(in_dim: int, cfg: TrainConfig, rng: np.random.Generator) -> ModelParams:
    return ModelParams.init(in_dim, cfg.proj_dim, cfg.variant, rng, cfg.temperature)


def train(dataset: FeatureDataset, cfg: TrainConfig, callback=None):
    """Train a head on ``dataset``; returns ``(params, history)``.

    Everything random (initialisation, batches, negatives, OIM table) draws
    from one generator seeded with ``cfg.seed``.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    params = init_model(dataset.feature_dim, cfg, rng)
    id_index = {ident: k for k, ident in enumerate(dataset.identities)}
    table = OimTable.random(len(id_index), cfg.proj_dim, rng,
                            momentum=cfg.oim_momentum, temperature=cfg.oim_temperature)
    clips = dataset_clips(dataset, cfg.clip_len, cfg.stride)
    ids_per_batch = min(cfg.ids_per_batch, len(id_index))
    per_batch = ids_per_batch * cfg.clips_per_id
    n_batches = cfg.batches_per_epoch or math.ceil(len(clips) / per_batch)
    state = SgdState.zeros_like(params)
    history = []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        sums = np.zeros(3)
        for _ in range(n_batches):
            batch = sample_batch(clips, rng, ids_per_batch, cfg.clips_per_id)
            pairs = pair_batch(batch, rng)
            loss = batch_loss(params, _group_pairs(dataset, pairs),
                              _group_clips(dataset, batch, id_index), table, cfg.lambda_id)
            feats = loss.grads.pop("_oim_features", None)
            sgd_step(params, loss.grads, state, lr, cfg)
            if feats is not None:
                oim_update(table, *feats)
            sums += (loss.bce, loss.oim, loss.accuracy)
        stats = EpochStats(epoch, lr, *(sums / n_batches))
        history.append(stats)
        log.info("epoch %d lr %.3g bce %.4f oim %.4f acc %.3f", epoch, lr, stats.bce, stats.oim, stats.accuracy)
        if callback is not None:
            callback(params, stats)
    return params, history


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"SCNC"
CKPT_VERSION = 1
_U32 = struct.Struct("<I")


def encode_checkpoint(params: ModelParams, cfg: TrainConfig | None = None) -> bytes:
    """Layer tensors in float64 plus a JSON echo of the config, CRC32-sealed.

    Layout: magic, version, layer count, then per layer the name (length
    prefixed), in/out dims, weight and bias; then a length-prefixed JSON blob
    and a CRC32 of everything before it.
    """
    out = [CKPT_MAGIC, _U32.pack(CKPT_VERSION)]
    layers = {"fc0": params.fc0, "fc1": params.fc1, "fc2": params.fc2, "fc3": params.fc3}
    out.append(_U32.pack(len(layers)))
    for name, layer in layers.items():
        nb = name.encode()
        out += [_U32.pack(len(nb)), nb, struct.pack("<II", layer.in_dim, layer.out_dim),
                np.ascontiguousarray(layer.weight, dtype="<f8").tobytes(),
                np.ascontiguousarray(layer.bias, dtype="<f8").tobytes()]
    meta = {"variant": params.variant, "temperature": params.temperature,
            "train_config": cfg.to_dict() if cfg is not None else None}
    blob = json.dumps(meta, sort_keys=True).encode()
    out += [_U32.pack(len(blob)), blob]
    body = b"".join(out)
    return body + _U32.pack(zlib.crc32(body))


def decode_checkpoint(data: bytes):
    if data[:4] != CKPT_MAGIC:
        raise BadMagicError(f"not a checkpoint (magic {data[:4]!r})")
    if len(data) < 16:
        raise TruncatedError("checkpoint too short")
    (crc,) = _U32.unpack_from(data, len(data) - 4)
    body = data[:-4]
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise TruncatedError("checkpoint ends early")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    (version,) = _U32.unpack(take(4))
    if version != CKPT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    (n_layers,) = _U32.unpack(take(4))
    layers = {}
    for _ in range(n_layers):
        (ln,) = _U32.unpack(take(4))
        name = take(ln).decode()
        i, o = struct.unpack("<II", take(8))
        w = np.frombuffer(take(8 * i * o), dtype="<f8").reshape(i, o).astype(np.float64)
        b = np.frombuffer(take(8 * o), dtype="<f8").astype(np.float64)
        layers[name] = nk.LinearLayer(w, b)
    (jn,) = _U32.unpack(take(4))
    meta = json.loads(take(jn).decode())
    if pos != len(body):
        raise TruncatedError("trailing bytes after checkpoint metadata")
    if crc != zlib.crc32(body):
        raise ChecksumError("checkpoint CRC32 mismatch")
    params = ModelParams(layers["fc0"], layers["fc1"], layers["fc2"], layers["fc3"],
                         meta["variant"], meta["temperature"])
    cfg = TrainConfig.from_dict(meta["train_config"]) if meta.get("train_config") else None
    return params, cfg


def save_checkpoint(path, params: ModelParams, cfg: TrainConfig | None = None) -> None:
    atomic_write(Path(path), encode_checkpoint(params, cfg))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
