"""Checkpoint container: named tensors plus JSON metadata in one .npz file.

A checkpoint stores every learned tensor (encoder, and decoder or head when
present), batch-norm running statistics, Adam moment buffers with the step
count, the resolved configuration, and a stage tag. Loading restores arrays
byte-for-byte, so a save/load round trip reproduces forward passes exactly.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

STAGE_PRETRAINED = "pretrained"
STAGE_FINETUNED = "finetuned"


@dataclass
class Checkpoint:
    stage: str
    config: dict
    fingerprint: str
    arrays: dict[str, np.ndarray]
    meta: dict

    def net_arrays(self, net: str) -> dict[str, np.ndarray]:
        """Tensors belonging to one sub-network, keys stripped of the prefix."""
        prefix = f"net.{net}."
        out = {k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)}
        if not out:
            raise KeyError(f"checkpoint has no tensors for network {net!r}")
        return out

    def optimizer_arrays(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if k.startswith("adam.")}

    def has_net(self, net: str) -> bool:
        prefix = f"net.{net}."
        return any(k.startswith(prefix) for k in self.arrays)


def save_checkpoint(path: str | Path, stage: str, config: dict, fingerprint: str,
                    nets: dict[str, dict[str, np.ndarray]],
                    optimizer_arrays: dict[str, np.ndarray] | None = None,
                    extra_meta: dict | None = None) -> Path:
    if stage not in (STAGE_PRETRAINED, STAGE_FINETUNED):
        raise ValueError(f"unknown stage {stage!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload: dict[str, np.ndarray] = {}
    for net_name, arrays in nets.items():
        for key, arr in arrays.items():
            payload[f"net.{net_name}.{key}"] = arr
    if optimizer_arrays:
        payload.update(optimizer_arrays)
    meta = {
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "config": config,
        "config_fingerprint": fingerprint,
        "nets": sorted(nets.keys()),
    }
    if extra_meta:
        meta.update(extra_meta)
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    # write via a buffer so a crash cannot leave a truncated file behind
    buf = io.BytesIO()
    np.savez(buf, **payload)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path) as data:
        if "__meta__" not in data:
            raise ValueError(f"{path} is not a checkpoint file (missing metadata)")
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(
                f"unsupported checkpoint format version {meta.get('format_version')!r}")
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    return Checkpoint(
        stage=meta["stage"],
        config=meta["config"],
        fingerprint=meta["config_fingerprint"],
        arrays=arrays,
        meta=meta,
    )
