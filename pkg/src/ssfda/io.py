"""Binary checkpoints, binary scene datasets, and JSON report helpers.

Checkpoint layout (all integers little-endian)::

    b"SSFD" | u16 version | u32 n_params
    per param: u32 name_len | name (UTF-8) | u32 rank | u32 dims[rank] | f64 payload
    u32 CRC32 of every preceding byte

Scene record layout: u32 w | u32 h | f64 image[3*h*w] | u8 label[h*w].
"""
from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .segnet import ModelParams, NetConfig, param_shapes
from .synthweather import CorruptionSpec, Scene

MAGIC = b"SSFD"
VERSION = 1
DATASET_FORMAT = "ssfda-scenes/1"


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------- checkpoints


def checkpoint_bytes(params: ModelParams) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{t.values.ndim}I", t.values.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.values, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def parse_checkpoint(data: bytes) -> ModelParams:
    if len(data) < 14 or data[:4] != MAGIC:
        raise CheckpointError("not an SSFD checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch (corrupt or truncated)")
    version, count = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 10
    params = ModelParams()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", body, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            size = math.prod(dims)
            arr = np.frombuffer(body, dtype="<f8", count=size, offset=off).astype(np.float64).reshape(dims)
            off += 8 * size
            params[name] = Tensor(arr, requires_grad=True)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    if off != len(body):
        raise CheckpointError("trailing bytes after parameter table")
    return params


def save_checkpoint(path: str | os.PathLike, params: ModelParams) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: str | os.PathLike, cfg: NetConfig | None = None) -> ModelParams:
    params = parse_checkpoint(Path(path).read_bytes())
    if cfg is not None:
        check_shapes(params, cfg)
    return params


def check_shapes(params: ModelParams, cfg: NetConfig) -> None:
    want = dict(param_shapes(cfg))
    have = params.shapes()
    if list(want) != list(have) or any(tuple(want[k]) != tuple(have[k]) for k in want):
        raise CheckpointError("checkpoint parameter table does not match the network config")


# ---------------------------------------------------------------- datasets


def scene_record(scene: Scene) -> bytes:
    _, h, w = scene.image.shape
    return (struct.pack("<II", w, h)
            + np.ascontiguousarray(scene.image, dtype="<f8").tobytes()
            + np.ascontiguousarray(scene.label, dtype=np.uint8).tobytes())


def read_record(buf: bytes, off: int) -> tuple[np.ndarray, np.ndarray, int]:
    w, h = struct.unpack_from("<II", buf, off)
    off += 8
    n = 3 * h * w
    image = np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(3, h, w)
    off += 8 * n
    label = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=off).reshape(h, w).copy()
    return image, label, off + h * w


@dataclass
class Split:
    name: str
    scenes: list[Scene]

    @property
    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.scenes])

    @property
    def labels(self) -> np.ndarray:
        return np.stack([s.label for s in self.scenes])

    def groups(self) -> dict[str, list[int]]:
        """Scene indices keyed by corruption tag ("clean" when uncorrupted), in first-seen order."""
        out: dict[str, list[int]] = {}
        for i, s in enumerate(self.scenes):
            out.setdefault(s.corruption.tag if s.corruption else "clean", []).append(i)
        return out


def write_dataset(root: str | os.PathLike, splits: dict[str, list[Scene]], meta: dict | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"format": DATASET_FORMAT, "meta": meta or {}, "splits": {}}
    for name, scenes in splits.items():
        fname = f"{name}.bin"
        entries = []
        with open(root / fname, "wb") as fh:
            for s in scenes:
                fh.write(scene_record(s))
                entries.append({"seed": s.seed, "corruption": s.corruption.to_dict() if s.corruption else None})
        manifest["splits"][name] = {"file": fname, "count": len(scenes), "scenes": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(root: str | os.PathLike) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"unsupported dataset format {manifest.get('format')!r}")
    return manifest


def read_split(root: str | os.PathLike, name: str) -> Split:
    manifest = read_manifest(root)
    if name not in manifest["splits"]:
        raise KeyError(f"dataset has no split {name!r}; available: {sorted(manifest['splits'])}")
    entry = manifest["splits"][name]
    buf = (Path(root) / entry["file"]).read_bytes()
    scenes, off = [], 0
    for rec in entry["scenes"]:
        image, label, off = read_record(buf, off)
        scenes.append(Scene(image, label, int(rec["seed"]), CorruptionSpec.from_dict(rec["corruption"])))
    if off != len(buf) or len(scenes) != entry["count"]:
        raise ValueError(f"split {name!r}: record count does not match the manifest")
    return Split(name, scenes)


# ---------------------------------------------------------------- reports


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, (np.floating,)):
        return _clean(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_json(path: str | os.PathLike, doc) -> None:
    Path(path).write_text(json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n", encoding="utf-8")
