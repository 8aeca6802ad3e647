"""Feature-shard file format, dataset manifests, synthetic imbalanced data
generation, and deterministic batching.

Shard format (little-endian, "CRFT" version 1):

    offset  size          field
    0       4             magic b"CRFT"
    4       4             version (u32) == 1
    8       4             ndim (u32) == 2
    12      8 * ndim      dims (u64 each), row-major extents (T, D)
    12+8n   4 * T * D     payload, float32 row-major

A 1x1 shard is therefore 4+4+4+16+4 = 32 bytes. Round-trips are byte-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .model import Batch

SHARD_MAGIC = b"CRFT"
SHARD_VERSION = 1
SPLITS = ("train", "dev", "test")


# ---------------------------------------------------------------------------
# CRFT shard encoding


def encode_shard(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.ndim != 2:
        raise FormatError(f"shards hold 2-D arrays, got ndim={array.ndim}")
    if not np.isfinite(array).all():
        raise FormatError("shard payload must be finite")
    payload = np.ascontiguousarray(array, dtype="<f4")
    header = struct.pack(
        "<4sII", SHARD_MAGIC, SHARD_VERSION, 2
    ) + struct.pack("<QQ", *array.shape)
    return header + payload.tobytes()


def decode_shard(buf: bytes, context: str = "shard") -> np.ndarray:
    if len(buf) < 12:
        raise FormatError(f"{context}: truncated header, got {len(buf)} bytes")
    magic, version, ndim = struct.unpack_from("<4sII", buf, 0)
    if magic != SHARD_MAGIC:
        raise FormatError(f"{context}: bad magic {magic!r} at offset 0")
    if version != SHARD_VERSION:
        raise FormatError(f"{context}: unsupported version {version} at offset 4")
    if ndim != 2:
        raise FormatError(f"{context}: expected 2 dims, got {ndim} at offset 8")
    dims_end = 12 + 8 * ndim
    if len(buf) < dims_end:
        raise FormatError(f"{context}: truncated dims, got {len(buf)} bytes")
    dims = struct.unpack_from("<QQ", buf, 12)
    expected = dims_end + 4 * dims[0] * dims[1]
    if len(buf) != expected:
        raise FormatError(
            f"{context}: payload length mismatch, expected {expected} bytes total, "
            f"got {len(buf)}"
        )
    data = np.frombuffer(buf, dtype="<f4", offset=dims_end).reshape(dims)
    return np.ascontiguousarray(data)


def write_shard(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_shard(array))


def read_shard(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read shard {path}: {e}") from e
    return decode_shard(buf, context=str(path))


# ---------------------------------------------------------------------------
# label maps and manifests


@dataclass(frozen=True)
class LabelMap:
    names: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ConfigError("label names must be unique")
        if not self.names:
            raise ConfigError("label map must not be empty")

    @property
    def index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)


@dataclass
class ManifestRecord:
    id: str
    label: str
    speech_path: str
    text_path: str
    split: str


def load_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    records = []
    seen = set()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{lineno}: invalid JSON: {e}") from e
        missing = {"id", "label", "speech_path", "text_path", "split"} - obj.keys()
        if missing:
            raise DataError(f"{path}:{lineno}: missing fields {sorted(missing)}")
        if obj["split"] not in SPLITS:
            raise DataError(f"{path}:{lineno}: unknown split {obj['split']!r}")
        if obj["id"] in seen:
            raise DataError(f"{path}:{lineno}: duplicate id {obj['id']!r}")
        seen.add(obj["id"])
        records.append(ManifestRecord(**{k: obj[k] for k in
                                         ("id", "label", "speech_path", "text_path", "split")}))
    return records


def count_labels(records: Sequence[ManifestRecord], split: str, label_map: LabelMap) -> np.ndarray:
    """Exact per-class counts for one split, in label-map order."""
    index = label_map.index
    counts = np.zeros(len(label_map), dtype=np.int64)
    for rec in records:
        if rec.split != split:
            continue
        if rec.label not in index:
            raise DataError(f"utterance {rec.id}: unknown label {rec.label!r}")
        counts[index[rec.label]] += 1
    return counts


# ---------------------------------------------------------------------------
# synthetic data generation


@dataclass
class SynthSpec:
    """Gaussian cluster generator for paired speech/text sequences.

    Class centroids are drawn once per seed with scale ``sigma_between``;
    every frame/token adds ``sigma_within`` noise. With probability
    ``1 - cross_modal_agreement`` the text side is drawn from a different
    class's centroid, which makes fusion genuinely informative.
    """

    num_classes: int
    class_proportions: tuple[float, ...]
    labels: tuple[str, ...]
    sigma_between: float = 1.0
    sigma_within: float = 4.0
    cross_modal_agreement: float = 0.85
    speech_len_range: tuple[int, int] = (8, 16)
    text_len_range: tuple[int, int] = (4, 10)
    speech_dim: int = 16
    text_dim: int = 16
    counts: dict[str, int] = field(default_factory=lambda: {"train": 600, "dev": 100, "test": 100})
    seed: int = 0

    def __post_init__(self):
        self.class_proportions = tuple(float(p) for p in self.class_proportions)
        self.labels = tuple(self.labels)
        if len(self.class_proportions) != self.num_classes:
            raise ConfigError("one proportion per class required")
        if len(self.labels) != self.num_classes:
            raise ConfigError("one label name per class required")
        if any(p <= 0 for p in self.class_proportions):
            raise ConfigError("class proportions must be positive")
        if abs(sum(self.class_proportions) - 1.0) > 1e-9:
            raise ConfigError(f"proportions must sum to 1, got {sum(self.class_proportions)}")
        if not 0.0 <= self.cross_modal_agreement <= 1.0:
            raise ConfigError("cross-modal agreement must lie in [0, 1]")
        for lo, hi in (self.speech_len_range, self.text_len_range):
            if lo < 1 or hi < lo:
                raise ConfigError("length ranges must satisfy 1 <= lo <= hi")
        if set(self.counts) - set(SPLITS):
            raise ConfigError(f"unknown split names in counts: {sorted(set(self.counts) - set(SPLITS))}")
        if self.sigma_between <= 0 or self.sigma_within < 0:
            raise ConfigError("sigma_between must be > 0 and sigma_within >= 0")

    def to_json_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "class_proportions": list(self.class_proportions),
            "labels": list(self.labels),
            "sigma_between": self.sigma_between,
            "sigma_within": self.sigma_within,
            "cross_modal_agreement": self.cross_modal_agreement,
            "speech_len_range": list(self.speech_len_range),
            "text_len_range": list(self.text_len_range),
            "speech_dim": self.speech_dim,
            "text_dim": self.text_dim,
            "counts": dict(self.counts),
            "seed": self.seed,
        }

    @staticmethod
    def from_json_dict(obj: dict) -> "SynthSpec":
        known = {
            "num_classes", "class_proportions", "labels", "sigma_between",
            "sigma_within", "cross_modal_agreement", "speech_len_range",
            "text_len_range", "speech_dim", "text_dim", "counts", "seed",
        }
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
        required = {"num_classes", "class_proportions", "labels"}
        missing = required - set(obj)
        if missing:
            raise ConfigError(f"synth spec missing keys: {sorted(missing)}")
        obj = dict(obj)
        for key in ("speech_len_range", "text_len_range"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return SynthSpec(**obj)


# Class frequencies of the emotion corpora these presets imitate; proportions
# are the normalized training-split counts.
MELD_LIKE_COUNTS = {
    "anger": 1109,
    "disgust": 271,
    "fear": 268,
    "joy": 1743,
    "neutral": 4710,
    "sadness": 683,
    "surprise": 1205,
}
IEMOCAP_LIKE_COUNTS = {
    "angry": 1103,
    "happy": 1636,
    "neutral": 1708,
    "sad": 1084,
}

# Noise level at which a weighted-CE-only run lands mid-range (dev UAR in
# roughly 0.45-0.70) on the default meld-like sizes; pinned for the standard
# desk dataset.
DESK_SIGMA_WITHIN = 4.0
DESK_COUNTS = {"train": 6000, "dev": 800, "test": 800}


def _proportions_from_counts(counts: dict[str, int]) -> tuple[tuple[str, ...], tuple[float, ...]]:
    names = tuple(counts)
    total = sum(counts.values())
    return names, tuple(c / total for c in counts.values())


def preset_spec(name: str, seed: int = 0, num_classes: int = 4, **overrides) -> SynthSpec:
    """Named generator presets: meld-like, iemocap-like, balanced."""
    if name == "meld-like":
        labels, props = _proportions_from_counts(MELD_LIKE_COUNTS)
        base = dict(
            num_classes=len(labels),
            class_proportions=props,
            labels=labels,
            sigma_within=DESK_SIGMA_WITHIN,
            cross_modal_agreement=0.85,
            counts=dict(DESK_COUNTS),
        )
    elif name == "iemocap-like":
        labels, props = _proportions_from_counts(IEMOCAP_LIKE_COUNTS)
        base = dict(
            num_classes=len(labels),
            class_proportions=props,
            labels=labels,
            sigma_within=DESK_SIGMA_WITHIN,
            cross_modal_agreement=0.85,
            counts=dict(DESK_COUNTS),
        )
    elif name == "balanced":
        labels = tuple(f"class_{i}" for i in range(num_classes))
        base = dict(
            num_classes=num_classes,
            class_proportions=tuple(1.0 / num_classes for _ in range(num_classes)),
            labels=labels,
            sigma_within=DESK_SIGMA_WITHIN,
            cross_modal_agreement=0.85,
        )
    else:
        raise ConfigError(f"unknown preset {name!r}")
    base.update(overrides)
    return SynthSpec(seed=seed, **base)


def proportional_quotas(n: int, proportions: Sequence[float]) -> np.ndarray:
    """Largest-remainder allocation of n items to classes; exact for even splits."""
    raw = np.asarray(proportions, dtype=np.float64) * n
    base = np.floor(raw).astype(np.int64)
    remainder = n - int(base.sum())
    if remainder:
        # deterministic tie-break: larger fraction first, then lower index
        order = np.lexsort((np.arange(len(raw)), -(raw - base)))
        base[order[:remainder]] += 1
    return base


class GeneratedDataset(NamedTuple):
    manifest_path: Path
    sidecar_path: Path
    records: list


def generate_synthetic(spec: SynthSpec, out_dir) -> GeneratedDataset:
    """Write shards, manifest, and a sidecar describing the draw.

    Pure function of (spec, seed): re-running into a fresh directory produces
    byte-identical files.
    """
    out_dir = Path(out_dir)
    shard_dir = out_dir / "shards"
    shard_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    speech_centroids = rng.normal(0.0, spec.sigma_between, (spec.num_classes, spec.speech_dim))
    text_centroids = rng.normal(0.0, spec.sigma_between, (spec.num_classes, spec.text_dim))

    records: list[ManifestRecord] = []
    draw_log: dict[str, dict] = {}
    for split in SPLITS:
        n = int(spec.counts.get(split, 0))
        if n == 0:
            continue
        quotas = proportional_quotas(n, spec.class_proportions)
        label_ids = np.repeat(np.arange(spec.num_classes), quotas)
        rng.shuffle(label_ids)
        agree = 0
        class_counts = np.zeros(spec.num_classes, dtype=np.int64)
        for i, y in enumerate(label_ids):
            y = int(y)
            class_counts[y] += 1
            frames = int(rng.integers(spec.speech_len_range[0], spec.speech_len_range[1] + 1))
            tokens = int(rng.integers(spec.text_len_range[0], spec.text_len_range[1] + 1))
            if rng.random() < spec.cross_modal_agreement or spec.num_classes == 1:
                text_class = y
                agree += 1
            else:
                shift = int(rng.integers(1, spec.num_classes))
                text_class = (y + shift) % spec.num_classes
            speech = speech_centroids[y] + spec.sigma_within * rng.normal(
                size=(frames, spec.speech_dim)
            )
            text = text_centroids[text_class] + spec.sigma_within * rng.normal(
                size=(tokens, spec.text_dim)
            )
            uid = f"{split}-{i:06d}"
            speech_rel = f"shards/{uid}.speech.crft"
            text_rel = f"shards/{uid}.text.crft"
            write_shard(out_dir / speech_rel, speech)
            write_shard(out_dir / text_rel, text)
            records.append(
                ManifestRecord(
                    id=uid,
                    label=spec.labels[y],
                    speech_path=speech_rel,
                    text_path=text_rel,
                    split=split,
                )
            )
        draw_log[split] = {
            "class_counts": {spec.labels[j]: int(class_counts[j]) for j in range(spec.num_classes)},
            "text_cluster_agreements": agree,
            "total": n,
        }

    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w") as f:
        for rec in records:
            f.write(
                json.dumps(
                    {
                        "id": rec.id,
                        "label": rec.label,
                        "speech_path": rec.speech_path,
                        "text_path": rec.text_path,
                        "split": rec.split,
                    },
                    sort_keys=True,
                )
                + "\n"
            )

    sidecar_path = out_dir / "generator.json"
    sidecar = {
        "format": "crab-synth",
        "version": 1,
        "spec": spec.to_json_dict(),
        "speech_centroids": speech_centroids.tolist(),
        "text_centroids": text_centroids.tolist(),
        "draw_log": draw_log,
    }
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return GeneratedDataset(manifest_path=manifest_path, sidecar_path=sidecar_path, records=records)


# ---------------------------------------------------------------------------
# batching


class Utterance(NamedTuple):
    id: str
    label: int
    speech: np.ndarray  # (T, D_s) float32
    text: np.ndarray  # (L, D_t) float32


class Dataset:
    """One split held in memory, with deterministic shuffled batching."""

    def __init__(self, utterances: list[Utterance], label_map: LabelMap):
        self.utterances = utterances
        self.label_map = label_map

    def __len__(self) -> int:
        return len(self.utterances)

    def class_counts(self) -> np.ndarray:
        counts = np.zeros(len(self.label_map), dtype=np.int64)
        for u in self.utterances:
            counts[u.label] += 1
        return counts

    def batches(
        self, batch_size: int, shuffle_seed: Optional[int] = None, epoch: int = 0
    ) -> Iterator[Batch]:
        """Right-padded batches; the trailing partial batch is kept.

        Shuffle order is a pure function of (shuffle_seed, epoch); with
        ``shuffle_seed=None`` the manifest order is preserved.
        """
        order = np.arange(len(self.utterances))
        if shuffle_seed is not None:
            rng = np.random.default_rng(np.random.SeedSequence([shuffle_seed, epoch]))
            rng.shuffle(order)
        for start in range(0, len(order), batch_size):
            chunk = [self.utterances[i] for i in order[start : start + batch_size]]
            yield _collate(chunk)


def _collate(chunk: list[Utterance]) -> Batch:
    b = len(chunk)
    f_max = max(u.speech.shape[0] for u in chunk)
    l_max = max(u.text.shape[0] for u in chunk)
    d_s = chunk[0].speech.shape[1]
    d_t = chunk[0].text.shape[1]
    speech = np.zeros((b, f_max, d_s), dtype=np.float32)
    speech_mask = np.zeros((b, f_max), dtype=np.float32)
    text = np.zeros((b, l_max, d_t), dtype=np.float32)
    text_mask = np.zeros((b, l_max), dtype=np.float32)
    labels = np.zeros(b, dtype=np.int64)
    ids = []
    for i, u in enumerate(chunk):
        t, l = u.speech.shape[0], u.text.shape[0]
        speech[i, :t] = u.speech
        speech_mask[i, :t] = 1.0
        text[i, :l] = u.text
        text_mask[i, :l] = 1.0
        labels[i] = u.label
        ids.append(u.id)
    return Batch(
        speech=speech,
        speech_mask=speech_mask,
        text=text,
        text_mask=text_mask,
        labels=labels,
        ids=ids,
    )


def load_split(manifest_path, split: str, label_map: LabelMap) -> Dataset:
    """Read every shard of a split into memory."""
    manifest_path = Path(manifest_path)
    records = load_manifest(manifest_path)
    base = manifest_path.parent
    index = label_map.index
    utterances = []
    for rec in records:
        if rec.split != split:
            continue
        if rec.label not in index:
            raise DataError(f"utterance {rec.id}: unknown label {rec.label!r}")
        try:
            speech = read_shard(base / rec.speech_path)
            text = read_shard(base / rec.text_path)
        except (DataError, FormatError) as e:
            raise DataError(f"utterance {rec.id}: {e}") from e
        utterances.append(Utterance(rec.id, index[rec.label], speech, text))
    return Dataset(utterances, label_map)


def make_batches(
    manifest_path,
    split: str,
    batch_size: int,
    label_map: LabelMap,
    shuffle_seed: Optional[int] = None,
    epoch: int = 0,
) -> Iterator[Batch]:
    """Convenience wrapper: load a split and iterate its batches once."""
    dataset = load_split(manifest_path, split, label_map)
    if not len(dataset):
        raise DataError(f"split {split!r} is empty")
    return dataset.batches(batch_size, shuffle_seed=shuffle_seed, epoch=epoch)
