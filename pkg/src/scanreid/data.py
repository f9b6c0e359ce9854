"""Sequences, clip segmentation, batch/pair sampling, synthetic data, SCNF files."""

from __future__ import annotations

import json
import os
import struct
import tempfile
import warnings
import zlib
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, ChecksumError, ContractError, DimensionError,
                     TruncatedError, VersionError)

MAGIC = b"SCNF"
VERSION = 1
_HEADER = struct.Struct("<4sIQI")  # magic, version, record_count, feature_dim
_RECORD = struct.Struct("<III")  # identity, camera, frame_count
_FOOTER = struct.Struct("<I")


@dataclass
class SequenceRecord:
    identity: int
    camera: int
    features: np.ndarray  # (T, d) float32

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DimensionError("a sequence needs a (T, d) feature matrix with T >= 1")

    @property
    def length(self) -> int:
        return self.features.shape[0]


@dataclass
class FeatureDataset:
    records: list
    feature_dim: int

    def __post_init__(self):
        for r in self.records:
            if r.features.shape[1] != self.feature_dim:
                raise DimensionError(
                    f"record of identity {r.identity} has dim {r.features.shape[1]}, expected {self.feature_dim}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def identities(self) -> list:
        return sorted({r.identity for r in self.records})

    @property
    def cameras(self) -> list:
        return sorted({r.camera for r in self.records})

    def subset(self, identities) -> "FeatureDataset":
        keep = set(identities)
        return FeatureDataset([r for r in self.records if r.identity in keep], self.feature_dim)

    def equals(self, other: "FeatureDataset") -> bool:
        """Bitwise equality of labels and features."""
        if self.feature_dim != other.feature_dim or len(self) != len(other):
            return False
        return all(a.identity == b.identity and a.camera == b.camera
                   and a.features.shape == b.features.shape
                   and a.features.tobytes() == b.features.tobytes()
                   for a, b in zip(self.records, other.records))


@dataclass(frozen=True)
class ClipIndex:
    sequence: int
    start: int
    length: int
    identity: int = -1
    camera: int = -1


@dataclass(frozen=True)
class PairSample:
    probe: ClipIndex
    gallery: ClipIndex
    label: int


# ---------------------------------------------------------------------------
# segmentation


def segment(T: int, clip_len: int = 10, stride: int = 5) -> list:
    """Start/length windows over a sequence of ``T`` frames.

    Windows that would run past the end are dropped. A sequence shorter than
    ``clip_len`` becomes a single clip covering all of it.
    """
    if T < 1 or clip_len < 1 or stride < 1:
        raise ValueError("T, clip_len and stride must all be >= 1")
    if T < clip_len:
        return [ClipIndex(0, 0, T)]
    return [ClipIndex(0, s, clip_len) for s in range(0, T - clip_len + 1, stride)]


def dataset_clips(dataset: FeatureDataset, clip_len: int = 10, stride: int = 5) -> list:
    out = []
    for i, rec in enumerate(dataset.records):
        for c in segment(rec.length, clip_len, stride):
            out.append(ClipIndex(i, c.start, c.length, rec.identity, rec.camera))
    return out


def clip_features(dataset: FeatureDataset, clip: ClipIndex) -> np.ndarray:
    return dataset.records[clip.sequence].features[clip.start:clip.start + clip.length]


def sequence_clips(features: np.ndarray, clip_len: int = 10, stride: int = 5) -> list:
    """Clip arrays of one sequence grouped by length: ``{length: (n, L, d)}``."""
    groups = defaultdict(list)
    for c in segment(features.shape[0], clip_len, stride):
        groups[c.length].append(features[c.start:c.start + c.length])
    return {L: np.stack(v) for L, v in groups.items()}


# ---------------------------------------------------------------------------
# batches and pairs


def sample_batch(clips: list, rng: np.random.Generator, ids_per_batch: int = 16,
                 clips_per_id: int = 2) -> list:
    """Pick ``ids_per_batch`` identities and ``clips_per_id`` clips of each.

    Clips of one identity are spread over its cameras where possible, so that
    its positive pairs are cross-camera. Identities owning fewer clips than
    requested are sampled with replacement.
    """
    by_id = defaultdict(list)
    for c in clips:
        by_id[c.identity].append(c)
    ids = sorted(by_id)
    if len(ids) < ids_per_batch:
        raise ContractError(f"need {ids_per_batch} identities per batch, dataset has {len(ids)}")
    chosen = rng.choice(len(ids), size=ids_per_batch, replace=False)
    batch = []
    for k in chosen:
        own = by_id[ids[k]]
        by_cam = defaultdict(list)
        for c in own:
            by_cam[c.camera].append(c)
        if len(own) < clips_per_id:
            picks = [own[j] for j in rng.choice(len(own), size=clips_per_id, replace=True)]
        elif len(by_cam) >= 2:
            cams = sorted(by_cam)
            order = [cams[j] for j in rng.permutation(len(cams))]
            picks, used = [], set()
            j = 0
            while len(picks) < clips_per_id:
                pool = [c for c in by_cam[order[j % len(order)]] if c not in used]
                j += 1
                if not pool:
                    continue
                c = pool[rng.integers(len(pool))]
                used.add(c)
                picks.append(c)
        else:
            picks = [own[j] for j in rng.choice(len(own), size=clips_per_id, replace=False)]
        batch.extend(picks)
    return [batch[j] for j in rng.permutation(len(batch))]


def pair_batch(batch: list, rng: np.random.Generator) -> list:
    """All within-identity positives plus as many random cross-identity negatives.

    When the batch spans two or more cameras every pair is cross-camera.
    """
    multi_cam = len({c.camera for c in batch}) >= 2
    pos, neg = [], []
    for i in range(len(batch)):
        for j in range(i + 1, len(batch)):
            a, b = batch[i], batch[j]
            if multi_cam and a.camera == b.camera:
                continue
            (pos if a.identity == b.identity else neg).append((i, j))
    if not neg:
        warnings.warn("batch holds a single identity: no negative pairs", RuntimeWarning, stacklevel=2)
    n_neg = min(len(pos), len(neg))
    picked = rng.choice(len(neg), size=n_neg, replace=False) if n_neg else []
    pairs = [PairSample(batch[i], batch[j], 1) for i, j in pos]
    pairs += [PairSample(batch[neg[k][0]], batch[neg[k][1]], 0) for k in sorted(picked)]
    return pairs


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticConfig:
    n_identities: int = 32
    n_cameras: int = 2
    frames_per_sequence: int = 100
    feature_dim: int = 64
    camera_offset_scale: float = 0.5
    frame_noise_sigma: float = 0.5
    occlusion_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_identities", "n_cameras", "frames_per_sequence", "feature_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.occlusion_prob < 1.0:
            raise ValueError("occlusion_prob must lie in [0, 1)")
        if self.camera_offset_scale < 0 or self.frame_noise_sigma < 0:
            raise ValueError("scales must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def synthesize(cfg: SyntheticConfig, return_mask: bool = False):
    """Identity means + camera offsets + frame noise, with shared-distractor occlusion.

    One sequence per (identity, camera). With ``return_mask`` the boolean
    occlusion masks are returned alongside the dataset.
    """
    rng = np.random.default_rng(cfg.seed)
    d = cfg.feature_dim
    means = rng.standard_normal((cfg.n_identities, d))
    offsets = rng.standard_normal((cfg.n_cameras, d)) * cfg.camera_offset_scale
    distractor = rng.standard_normal(d)
    records, masks = [], []
    for i in range(cfg.n_identities):
        for c in range(cfg.n_cameras):
            T = cfg.frames_per_sequence
            frames = means[i] + offsets[c] + rng.standard_normal((T, d)) * cfg.frame_noise_sigma
            occluded = rng.random(T) < cfg.occlusion_prob
            frames[occluded] = distractor
            records.append(SequenceRecord(i, c, frames.astype(np.float32)))
            masks.append(occluded)
    ds = FeatureDataset(records, d)
    return (ds, masks) if return_mask else ds


def split_identities(dataset: FeatureDataset, train_fraction: float = 0.5):
    """Identity-disjoint split in sorted identity order: ``(train, test)``."""
    ids = dataset.identities
    n_train = int(round(len(ids) * train_fraction))
    return dataset.subset(ids[:n_train]), dataset.subset(ids[n_train:])


def probe_gallery(dataset: FeatureDataset, probe_camera: int | None = None):
    """Probe set = sequences from ``probe_camera``; gallery = every other camera."""
    cams = dataset.cameras
    if probe_camera is None:
        probe_camera = cams[0]
    probes = [r for r in dataset.records if r.camera == probe_camera]
    gallery = [r for r in dataset.records if r.camera != probe_camera]
    if len(cams) < 2:
        # single camera: first sequence of each identity probes, the rest form the gallery
        seen, probes, gallery = set(), [], []
        for r in dataset.records:
            (gallery if r.identity in seen else probes).append(r)
            seen.add(r.identity)
    return probes, gallery


# ---------------------------------------------------------------------------
# SCNF feature files


def atomic_write(path: Path, data: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def manifest_path(path) -> Path:
    return Path(path).with_suffix(".json")


def encode_features(dataset: FeatureDataset):
    """SCNF bytes plus the per-record byte offsets."""
    parts, offsets = [], []
    pos = _HEADER.size
    for r in dataset.records:
        feats = np.ascontiguousarray(r.features, dtype="<f4")
        chunk = _RECORD.pack(r.identity, r.camera, feats.shape[0]) + feats.tobytes()
        offsets.append(pos)
        pos += len(chunk)
        parts.append(chunk)
    payload = b"".join(parts)
    header = _HEADER.pack(MAGIC, VERSION, len(dataset.records), dataset.feature_dim)
    return header + payload + _FOOTER.pack(zlib.crc32(payload)), offsets


def write_features(dataset: FeatureDataset, path) -> None:
    blob, offsets = encode_features(dataset)
    manifest = {
        "format": "SCNF",
        "version": VERSION,
        "record_count": len(dataset.records),
        "feature_dim": dataset.feature_dim,
        "records": [{"offset": o, "identity": r.identity, "camera": r.camera, "frames": r.length}
                    for o, r in zip(offsets, dataset.records)],
    }
    atomic_write(Path(path), blob)
    atomic_write(manifest_path(path), json.dumps(manifest, indent=1).encode())


def decode_features(blob: bytes) -> FeatureDataset:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"not an SCNF file (magic {blob[:4]!r})")
    if len(blob) < _HEADER.size + _FOOTER.size:
        raise TruncatedError("file ends inside the header")
    _, version, count, dim = _HEADER.unpack_from(blob, 0)
    if version != VERSION:
        raise VersionError(f"unsupported SCNF version {version}")
    payload = blob[_HEADER.size:-_FOOTER.size]
    records, pos = [], 0
    for _ in range(count):
        if pos + _RECORD.size > len(payload):
            raise TruncatedError("file ends inside a record header")
        ident, cam, T = _RECORD.unpack_from(payload, pos)
        pos += _RECORD.size
        n = T * dim * 4
        if pos + n > len(payload):
            raise TruncatedError("file ends inside a record payload")
        feats = np.frombuffer(payload, dtype="<f4", count=T * dim, offset=pos).reshape(T, dim)
        records.append(SequenceRecord(ident, cam, feats.astype(np.float32)))
        pos += n
    if pos != len(payload):
        raise TruncatedError(f"payload length {len(payload)} disagrees with record table ({pos})")
    (crc,) = _FOOTER.unpack_from(blob, len(blob) - _FOOTER.size)
    if crc != zlib.crc32(payload):
        raise ChecksumError("CRC32 mismatch")
    return FeatureDataset(records, dim)


def read_features(path) -> FeatureDataset:
    return decode_features(Path(path).read_bytes())


def read_record(path, index: int) -> SequenceRecord:
    """Random access to one record through the sidecar manifest."""
    manifest = json.loads(manifest_path(path).read_text())
    entry = manifest["records"][index]
    dim = manifest["feature_dim"]
    with open(path, "rb") as fh:
        fh.seek(entry["offset"])
        head = fh.read(_RECORD.size)
        if len(head) < _RECORD.size:
            raise TruncatedError("record header past end of file")
        ident, cam, T = _RECORD.unpack(head)
        raw = fh.read(T * dim * 4)
    if len(raw) < T * dim * 4:
        raise TruncatedError("record payload past end of file")
    return SequenceRecord(ident, cam, np.frombuffer(raw, dtype="<f4").reshape(T, dim).astype(np.float32))

