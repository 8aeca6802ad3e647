"""Parameter checkpoints: a flat binary of CRFT-encoded tensors plus a JSON
index mapping each name to its shape, parameter group, and byte offset.

A checkpoint directory holds:
    params.bin   concatenated CRFT blobs (vectors stored as 1xN)
    index.json   entries, model config, label map, training-only extras
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .data import LabelMap, decode_shard, encode_shard
from .errors import ConfigError, FormatError
from .layers import LinearParams
from .model import CrabParams, ModelConfig, init_params, named_parameters
from .tensor import Tensor

INDEX_VERSION = 1

PARAMS_FILE = "params.bin"
INDEX_FILE = "index.json"


def _as_2d(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim == 2:
        return arr
    raise FormatError(f"cannot store rank-{arr.ndim} tensor in a shard")


def save_checkpoint(
    out_dir,
    params: CrabParams,
    label_map: LabelMap,
    extras: Optional[list[tuple[str, Tensor]]] = None,
) -> Path:
    """Write params.bin + index.json; extras (e.g. probe heads) are stored
    under their own names and ignored by the model loader."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    blobs = []
    entries = {}
    offset = 0
    items = [(name, t, group) for name, t, group in named_parameters(params)]
    for name, t in extras or []:
        items.append((f"extra.{name}", t, "MAIN"))
    for name, t, group in items:
        blob = encode_shard(_as_2d(t.data))
        entries[name] = {
            "shape": list(t.data.shape),
            "group": group,
            "offset": offset,
            "length": len(blob),
        }
        blobs.append(blob)
        offset += len(blob)

    (out_dir / PARAMS_FILE).write_bytes(b"".join(blobs))
    index = {
        "version": INDEX_VERSION,
        "entries": entries,
        "model_config": {
            "speech_feat_dim": params.config.speech_feat_dim,
            "text_feat_dim": params.config.text_feat_dim,
            "num_classes": params.config.num_classes,
            "hidden": params.config.hidden,
            "attention_heads": params.config.attention_heads,
            "csl_dim": params.config.csl_dim,
            "modality_mode": params.config.modality_mode.value,
            "encoder_stub": params.config.encoder_stub,
        },
        "label_map": list(label_map.names),
    }
    (out_dir / INDEX_FILE).write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return out_dir


def load_checkpoint(ckpt_dir) -> tuple[CrabParams, LabelMap, dict[str, np.ndarray]]:
    """Rebuild parameters from a checkpoint directory.

    Returns (params, label_map, extras); extras hold any training-only
    tensors (names prefixed "extra.") that are not part of the model.
    """
    ckpt_dir = Path(ckpt_dir)
    index_path = ckpt_dir / INDEX_FILE
    bin_path = ckpt_dir / PARAMS_FILE
    if not index_path.exists() or not bin_path.exists():
        raise FormatError(f"checkpoint at {ckpt_dir} is missing {INDEX_FILE} or {PARAMS_FILE}")
    index = json.loads(index_path.read_text())
    if index.get("version") != INDEX_VERSION:
        raise FormatError(f"unsupported checkpoint version {index.get('version')}")

    cfg = ModelConfig(**index["model_config"])
    label_map = LabelMap(tuple(index["label_map"]))
    buf = bin_path.read_bytes()

    arrays: dict[str, np.ndarray] = {}
    for name, entry in index["entries"].items():
        start, length = entry["offset"], entry["length"]
        if start + length > len(buf):
            raise FormatError(
                f"checkpoint entry {name}: needs bytes [{start}, {start + length}), "
                f"file has {len(buf)}"
            )
        arr = decode_shard(buf[start : start + length], context=f"checkpoint entry {name}")
        shape = tuple(entry["shape"])
        if int(np.prod(shape)) != arr.size:
            raise FormatError(f"checkpoint entry {name}: shape {shape} does not match payload")
        arrays[name] = arr.reshape(shape)

    # a freshly initialized skeleton provides the structure; overwrite values
    params = init_params(cfg, seed=0)
    extras: dict[str, np.ndarray] = {}
    expected = {name: t for name, t, _ in named_parameters(params)}
    for name, arr in arrays.items():
        if name.startswith("extra."):
            extras[name[len("extra."):]] = arr
            continue
        if name not in expected:
            raise FormatError(f"checkpoint entry {name} does not exist in this architecture")
        target = expected[name]
        if target.data.shape != arr.shape:
            raise ConfigError(
                f"checkpoint entry {name}: shape {arr.shape} does not match "
                f"architecture shape {target.data.shape}"
            )
        target.data = arr.astype(target.data.dtype)
    missing = set(expected) - {n for n in arrays if not n.startswith("extra.")}
    if missing:
        raise FormatError(f"checkpoint is missing parameters: {sorted(missing)[:5]} ...")
    return params, label_map, extras


def probes_to_extras(probes: list[LinearParams]) -> list[tuple[str, Tensor]]:
    items = []
    for i, p in enumerate(probes):
        items.append((f"mls_probe.{i}.weight", p.weight))
        items.append((f"mls_probe.{i}.bias", p.bias))
    return items
